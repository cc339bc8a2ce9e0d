"""End-to-end acceptance checks, one test per criterion.

Run alone with ``pytest tests/test_acceptance.py``; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import math
import time

import numpy as np
import pytest

from patientvae.cli import run
from patientvae.evaluation import (
    DiscriminatorReport,
    cloud_separation,
    fit_discriminator,
    pca_fit,
    pca_scatter,
)
from patientvae.numeric import RandomSource, derive_child_seed, gradient_check
from patientvae.records import (
    GENDERS,
    MONTHS,
    DataSchema,
    PatientRecord,
    certain_params,
    decode_params,
    encode_record,
    encode_records,
    parse_records,
)
from patientvae.vae import (
    GaussianLatent,
    VaeConfig,
    elbo_batch,
    generate,
    init_model,
    kl_to_standard_normal,
    load_model,
    save_model,
    train,
)

pytestmark = pytest.mark.acceptance

SEEDS = range(5)


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def random_features(rng, n, layout):
    x = np.zeros((n, layout.total_dim))
    x[np.arange(n), (rng.uniform(n) < 0.5).astype(int)] = 1
    x[:, layout.age] = rng.uniform(n)
    x[np.arange(n), layout.month.start + (rng.uniform(n) * 12).astype(int)] = 1
    k = layout.symptoms.stop - layout.symptoms.start
    x[:, layout.symptoms] = rng.uniform((n, k)) < 0.5
    return x


@criterion(1, "analytic gradients match central differences (rel < 1e-4, < 1 min)")
def test_gradient_correctness():
    # The fixed demographic block is 15 wide, so D=16 is the smallest layout with a symptom.
    cases = [(16, 2), (19, 4), (16, 4), (19, 2), (19, 4)]
    start = time.perf_counter()
    for seed, (d, latent) in enumerate(cases):
        rng = RandomSource(1000 + seed)
        schema = DataSchema(tuple(f"s{i}" for i in range(d - 15)), 0.0, 100.0)
        cfg = VaeConfig(input_dim=d, hidden_dim=16, latent_dim=latent)
        m = init_model(cfg, schema, "G", rng)
        m = m.with_parameters([p + 0.1 * rng.standard_normal(p.shape) for p in m.parameters()])
        x = random_features(rng, 4, schema.layout)
        eps = rng.standard_normal((4, latent))
        _, grads = elbo_batch(m, x, eps, 1.0)
        report = gradient_check(
            lambda ps: elbo_batch(m.with_parameters(ps), x, eps, 1.0, with_grads=False)[0].total,
            m.parameters(), grads, h=1e-5, tol=1e-4,
        )
        assert report.passed, (seed, report.worst_relative_error, report.worst_location)
    assert time.perf_counter() - start < 60


def mc_kl_antithetic(mu, logvar, n, rng):
    """Monte Carlo E_q[log q - log p] over n draws taken as n/2 antithetic pairs."""
    half = rng.standard_normal((n // 2, mu.size))
    e = np.vstack([half, -half])
    z = mu + np.exp(0.5 * logvar) * e
    log_q = -0.5 * e**2 - 0.5 * logvar
    log_p = -0.5 * z**2
    return float(np.mean(np.sum(log_q - log_p, axis=1)))


@criterion(2, "closed-form KL matches 1e6-sample Monte Carlo within 1%; KL(0,0) = 0")
def test_kl_oracle():
    rng = RandomSource(2024)
    for _ in range(10):
        latent = 1 + int(rng.uniform() * 4)
        mu = 4.0 * rng.uniform(latent) - 2.0
        logvar = 3.0 * rng.uniform(latent) - 1.5
        closed = float(kl_to_standard_normal(GaussianLatent(mu, logvar)))
        est = mc_kl_antithetic(mu, logvar, 1_000_000, rng)
        assert abs(est - closed) <= 0.01 * closed, (mu, logvar, closed, est)
    zero = kl_to_standard_normal(GaussianLatent(np.zeros(4), np.zeros(4)))
    assert float(zero) == 0.0


@pytest.fixture(scope="module")
def paper_scale(tmp_path_factory):
    """make-toy -> train (150 records, 90 epochs) -> generate 1000, all through the CLI."""
    root = tmp_path_factory.mktemp("paper_scale")
    data, model, synth = root / "toy.csv", root / "model.json", root / "synth.csv"
    start = time.perf_counter()
    assert run(["make-toy", "--count", "150", "--seed", "11", "--out", str(data)]) == 0
    assert run(["train", "--in", str(data), "--diagnosis", "Malaria", "--epochs", "90",
                "--seed", "11", "--out", str(model)]) == 0
    assert run(["generate", "--model", str(model), "--count", "1000", "--seed", "12",
                "--out", str(synth)]) == 0
    elapsed = time.perf_counter() - start
    real, _ = parse_records(data.read_text())
    generated, _ = parse_records(synth.read_text())
    return dict(real=real, generated=generated, model=load_model(model), elapsed=elapsed)


@criterion(3, "generated marginals match training data at paper scale (< 5 min)")
def test_distribution_matching(paper_scale):
    real, gen = paper_scale["real"], paper_scale["generated"]
    assert len(real) == 150 and len(gen) == 1000
    vocab = sorted({s for r in real for s in r.symptoms})
    assert len(vocab) == 4
    for s in vocab:
        f_real = np.mean([s in r.symptoms for r in real])
        f_gen = np.mean([s in r.symptoms for r in gen])
        assert abs(f_gen - f_real) <= 0.10, (s, f_real, f_gen)
    assert abs(np.mean([r.age_years for r in gen]) - np.mean([r.age_years for r in real])) <= 5.0
    female = lambda rs: np.mean([r.gender == "Female" for r in rs])
    assert abs(female(gen) - female(real)) <= 0.10
    assert paper_scale["elapsed"] < 300


@criterion(4, "discriminator AUC <= 0.75 on real vs generated for >= 4 of 5 seeds")
def test_near_chance_discriminability(paper_scale):
    model, real = paper_scale["model"], paper_scale["real"]
    x_real = encode_records(real, model.schema)
    aucs = []
    for seed in SEEDS:
        synth = generate(model, 150, RandomSource(derive_child_seed(seed, "acceptance/generate")))
        x_synth = encode_records(synth, model.schema)
        report = fit_discriminator(x_real, x_synth, RandomSource(seed))
        aucs.append(report.auc)
    print("discriminator AUCs:", [round(a, 3) for a in aucs])
    assert sum(a <= 0.75 for a in aucs) >= 4, aucs


@criterion(5, "PCA centroid gap at epoch 90 shrinks below 0.75 x pooled sd for >= 4 of 5 seeds")
def test_pca_convergence_trend(paper_scale):
    real = paper_scale["real"]
    schema = paper_scale["model"].schema
    x_real = encode_records(real, schema)
    outcomes = []
    for seed in SEEDS:
        cfg = VaeConfig(input_dim=schema.layout.total_dim, epochs=90, seed=seed, snapshot_epochs=[0, 90])
        rng = RandomSource(derive_child_seed(seed, "Malaria"))
        _, trace = train(init_model(cfg, schema, "Malaria", rng), real, rng)
        first, last = trace.snapshots
        assert (first.epoch, last.epoch) == (0, 90)
        d0, _ = cloud_separation(pca_scatter(x_real, first.features))
        d90, scale = cloud_separation(pca_scatter(x_real, last.features))
        outcomes.append((d90 <= 0.75 * scale and d90 < d0, d0, d90, scale))
    print("(ok, d0, d90, scale):", outcomes)
    assert sum(ok for ok, *_ in outcomes) >= 4, outcomes


def sign_normalize(v):
    return v if v[np.argmax(np.abs(v))] > 0 else -v


@criterion(6, "pca_fit matches brute-force eigendecomposition on 20 random matrices")
def test_pca_oracle():
    rng = RandomSource(6)
    for trial in range(20):
        n = 2 + int(rng.uniform() * 7)
        d = 2 + int(rng.uniform() * 7)
        data = rng.standard_normal((n, d)) * (1.0 + 3.0 * rng.uniform(d))
        centered = data - data.mean(axis=0)
        evals, evecs = np.linalg.eigh(centered.T @ centered / (n - 1))
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        k = min(n - 1, d)  # the rank of the covariance
        model = pca_fit(data, k)
        comps = np.asarray(model.components)
        np.testing.assert_allclose(comps @ comps.T, np.eye(k), atol=1e-8)
        for i in range(k):
            assert abs(model.eigenvalues[i] - evals[i]) <= 1e-6 * evals[i], (trial, i)
            cos = float(sign_normalize(comps[i]) @ sign_normalize(evecs[:, i]))
            assert 1.0 - cos <= 1e-6, (trial, i, cos)


@criterion(7, "codec round trip preserves 1000 random records (age within 0.1 y)")
def test_codec_round_trip():
    vocab = ("body weakness", "cough", "fever", "headaches", "vomiting")
    schema = DataSchema(vocab, 0.0, 100.0)
    rng = RandomSource(7)
    for _ in range(1000):
        u = rng.uniform(3 + len(vocab))
        record = PatientRecord(
            GENDERS[int(u[0] * 2)],
            float(u[1] * 100.0),
            MONTHS[int(u[2] * 12)],
            frozenset(s for s, flag in zip(vocab, u[3:] < 0.5) if flag),
            "Malaria",
        )
        x = encode_record(record, schema)
        back = decode_params(certain_params(x, schema.layout), schema, "argmax", diagnosis="Malaria")
        assert (back.gender, back.month, back.symptoms) == (record.gender, record.month, record.symptoms)
        assert abs(back.age_years - record.age_years) <= 0.1
    # Out-of-bounds ages clamp to the schema range.
    narrow = DataSchema(vocab, 10.0, 20.0)
    for age, expected in [(3.0, 10.0), (55.0, 20.0)]:
        x = encode_record(PatientRecord("Male", age, "May", frozenset(), "M"), narrow)
        back = decode_params(certain_params(x, narrow.layout), narrow, "argmax", diagnosis="M")
        assert back.age_years == expected


@criterion(8, "training is byte-reproducible and save/load preserves generation")
def test_determinism_and_persistence(tmp_path):
    data = tmp_path / "toy.csv"
    assert run(["make-toy", "--count", "150", "--seed", "8", "--out", str(data)]) == 0
    files = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert run(["train", "--in", str(data), "--diagnosis", "Malaria", "--epochs", "20",
                    "--seed", "8", "--out", str(out)]) == 0
        files.append(out.read_bytes())
    assert files[0] == files[1]
    model = load_model(files[0])
    reloaded = load_model(save_model(model))
    assert generate(model, 100, RandomSource(81)) == generate(reloaded, 100, RandomSource(81))
    assert save_model(reloaded) == files[0]


@criterion(9, "report rendering reproduces the fixture table verbatim")
def test_report_fidelity():
    report = DiscriminatorReport.from_counts(3, 15, 7, 30)
    assert report.render_table().splitlines() == [
        "Synthetic identified as synthetic 20.0%",
        "Real identified as synthetic 23.3%",
        "Synthetic identified as real 80.0%",
    ]
    assert math.isclose(report.synthetic_as_synthetic_pct + report.synthetic_as_real_pct, 100.0)
