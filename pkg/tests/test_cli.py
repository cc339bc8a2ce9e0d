import json

import pytest

from patientvae.cli import run
from patientvae.evaluation import ScatterDataset
from patientvae.records import default_toy_spec, format_records, generate_toy_dataset, parse_records
from patientvae.numeric import RandomSource
from patientvae.vae import load_model


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    assert run(["make-toy", "--count", "60", "--seed", "3", "--out", str(path)]) == 0
    return path


@pytest.fixture
def two_diagnoses(tmp_path):
    a = generate_toy_dataset(default_toy_spec(), 30, RandomSource(1))
    spec = default_toy_spec()
    spec.diagnosis = "Pneumonia"
    spec.symptom_probs = {"cough": 0.9, "fever": 0.6}
    b = generate_toy_dataset(spec, 30, RandomSource(2))
    path = tmp_path / "mixed.csv"
    path.write_text(format_records(a + b))
    return path


def small(*extra):
    return ["--epochs", "3", "--seed", "5", *extra]


def test_make_toy_default(toy_csv):
    records, issues = parse_records(toy_csv.read_text())
    assert len(records) == 60 and not issues
    assert {r.diagnosis for r in records} == {"Malaria"}


def test_make_toy_with_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"diagnosis": "Flu", "symptom_probs": {"cough": 1.0}}))
    out = tmp_path / "t.csv"
    assert run(["make-toy", "--spec", str(spec), "--count", "5", "--out", str(out)]) == 0
    records, _ = parse_records(out.read_text())
    assert all(r.symptoms == {"cough"} and r.diagnosis == "Flu" for r in records)


def test_make_toy_bad_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"symptom_probs": {"cough": 3.0}}))
    assert run(["make-toy", "--spec", str(spec), "--count", "5", "--out", str(tmp_path / "x.csv")]) == 2


def test_infer_schema(toy_csv, tmp_path):
    out = tmp_path / "schema.json"
    assert run(["infer-schema", "--in", str(toy_csv), "--out", str(out)]) == 0
    obj = json.loads(out.read_text())
    assert obj["symptom_vocab"] == ["body weakness", "fever", "headaches", "vomiting"]
    assert obj["version"] == 1 and obj["age_min"] < obj["age_max"]


def test_train_generate(toy_csv, tmp_path):
    model = tmp_path / "m.json"
    assert run(["train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(model), *small()]) == 0
    assert load_model(model).diagnosis == "Malaria"
    synth = tmp_path / "s.csv"
    assert run(["generate", "--model", str(model), "--count", "5", "--seed", "9", "--out", str(synth)]) == 0
    lines = synth.read_text().splitlines()
    assert lines[0] == "gender,age,month,symptoms,diagnosis" and len(lines) == 6
    records, issues = parse_records(synth.read_text())
    assert len(records) == 5 and not issues
    assert all(r.diagnosis == "Malaria" and r.age_years == round(r.age_years, 1) for r in records)


def test_train_is_byte_reproducible(toy_csv, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run(["train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(out), *small()]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_generate_reproducible_and_argmax(toy_csv, tmp_path):
    model = tmp_path / "m.json"
    run(["train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(model), *small()])
    outs = []
    for name, mode in [("1", "sample"), ("2", "sample"), ("3", "argmax")]:
        out = tmp_path / f"s{name}.csv"
        assert run(["generate", "--model", str(model), "--count", "20", "--seed", "2", "--mode", mode, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_missing_diagnosis(toy_csv, tmp_path, capsys):
    code = run(["train", "--in", str(toy_csv), "--diagnosis", "Typhoid", "--out", str(tmp_path / "m.json")])
    assert code == 2
    assert "no records for diagnosis" in capsys.readouterr().err


def test_train_all_is_order_independent(two_diagnoses, tmp_path):
    outdir = tmp_path / "models"
    assert run(["train", "--in", str(two_diagnoses), "--all", "--out", str(outdir), *small()]) == 0
    assert sorted(p.name for p in outdir.iterdir()) == ["model.Malaria.json", "model.Pneumonia.json"]
    # Reversing the row order must not change any model.
    records, _ = parse_records(two_diagnoses.read_text())
    flipped = tmp_path / "flipped.csv"
    malaria = [r for r in records if r.diagnosis == "Malaria"]
    pneumonia = [r for r in records if r.diagnosis == "Pneumonia"]
    flipped.write_text(format_records(pneumonia + malaria))
    outdir2 = tmp_path / "models2"
    assert run(["train", "--in", str(flipped), "--all", "--out", str(outdir2), *small()]) == 0
    for name in ("model.Malaria.json", "model.Pneumonia.json"):
        assert (outdir / name).read_bytes() == (outdir2 / name).read_bytes()
    # A single-diagnosis run matches the --all output for that diagnosis.
    single = tmp_path / "single.json"
    run(["train", "--in", str(two_diagnoses), "--diagnosis", "Pneumonia", "--out", str(single), *small()])
    assert single.read_bytes() == (outdir / "model.Pneumonia.json").read_bytes()


def test_snapshots(toy_csv, tmp_path):
    snaps = tmp_path / "snaps"
    args = ["train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(tmp_path / "m.json")]
    assert run([*args, "--epochs", "30", "--snapshots-dir", str(snaps)]) == 0
    names = sorted(p.name for p in snaps.iterdir())
    assert names == [
        "snapshot.Malaria.epoch000.csv", "snapshot.Malaria.epoch000.svg",
        "snapshot.Malaria.epoch030.csv", "snapshot.Malaria.epoch030.svg",
    ]
    ds = ScatterDataset.from_csv((snaps / "snapshot.Malaria.epoch030.csv").read_text())
    assert [p.source for p in ds.points].count("synthetic") == 200
    assert [p.source for p in ds.points].count("real") == 60


def test_eval_pca(toy_csv, tmp_path):
    other = tmp_path / "other.csv"
    run(["make-toy", "--count", "40", "--seed", "4", "--out", str(other)])
    out, svg = tmp_path / "scatter.csv", tmp_path / "scatter.svg"
    assert run(["eval-pca", "--real", str(toy_csv), "--synthetic", str(other), "--out", str(out), "--svg", str(svg)]) == 0
    ds = ScatterDataset.from_csv(out.read_text())
    assert len(ds.points) == 100
    assert svg.read_text().count("<circle") == 100


def test_eval_discriminator(toy_csv, tmp_path, capsys):
    other = tmp_path / "other.csv"
    run(["make-toy", "--count", "60", "--seed", "4", "--out", str(other)])
    out = tmp_path / "report.json"
    assert run(["eval-discriminator", "--real", str(toy_csv), "--synthetic", str(other), "--seed", "1", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert 0.0 <= report["auc"] <= 1.0
    assert report["table"][0].startswith("Synthetic identified as synthetic ")
    assert "Real identified as synthetic" in capsys.readouterr().out
    out2 = tmp_path / "report2.json"
    run(["eval-discriminator", "--real", str(toy_csv), "--synthetic", str(other), "--seed", "1", "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_eval_discriminator_too_small(toy_csv, tmp_path):
    tiny = tmp_path / "tiny.csv"
    run(["make-toy", "--count", "5", "--out", str(tiny)])
    assert run(["eval-discriminator", "--real", str(toy_csv), "--synthetic", str(tiny), "--out", str(tmp_path / "r.json")]) == 2


def test_stats_and_compare(toy_csv, tmp_path):
    out = tmp_path / "stats.json"
    assert run(["stats", "--in", str(toy_csv), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["count"] == 60 and sum(rep["month_histogram"].values()) == 60
    diff = tmp_path / "diff.json"
    assert run(["stats", "--compare", str(toy_csv), str(toy_csv), "--out", str(diff)]) == 0
    d = json.loads(diff.read_text())
    assert d["max_symptom_diff"] == 0.0 and d["month_l1"] == 0.0


def test_bad_rows_reported_with_location(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("gender,age,month,symptoms,diagnosis\nFemale,28.3,Aprill,fever,Malaria\n"
                    "Male,30,May,fever,Malaria\n")
    assert run(["stats", "--in", str(path), "--out", str(tmp_path / "s.json")]) == 0
    assert f"{path}: line 2: unknown month" in capsys.readouterr().err


def test_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    assert run(["stats", "--in", str(path), "--out", str(tmp_path / "s.json")]) == 2


def test_missing_file(tmp_path):
    assert run(["stats", "--in", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "s.json")]) == 2


def test_corrupt_model(tmp_path):
    model = tmp_path / "m.json"
    model.write_text('{"format_version": 1, "diag')
    assert run(["generate", "--model", str(model), "--count", "2", "--out", str(tmp_path / "s.csv")]) == 2


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["train", "--in", "x.csv"], ["generate", "--model", "m", "--count", "1", "--out", "o", "--wat"],
     ["generate", "--model", "m", "--count", "1", "--out", "o", "--mode", "median"]],
)
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_numeric_failure(toy_csv, tmp_path):
    args = ["train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(tmp_path / "m.json")]
    assert run([*args, "--epochs", "3", "--lr", "1e300"]) == 3


def test_verbose_logs_epochs(toy_csv, tmp_path, capsys):
    args = ["-v", "train", "--in", str(toy_csv), "--diagnosis", "Malaria", "--out", str(tmp_path / "m.json")]
    assert run([*args, "--epochs", "2"]) == 0
    err = capsys.readouterr().err
    assert "epoch 1:" in err and "epoch 2:" in err
