"""Command-line entry point: ``patientvae <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import NumericError, PatientVaeError
from .evaluation import (
    compare_marginals,
    fit_discriminator,
    marginal_report,
    pca_scatter,
    render_scatter_svg,
)
from .numeric import RandomSource, derive_child_seed
from .records import (
    ToySpec,
    default_toy_spec,
    encode_records,
    format_records,
    generate_toy_dataset,
    infer_schema,
    merge_schemas,
    parse_records,
    partition_by_diagnosis,
)
from .vae import VaeConfig, generate, init_model, load_model, save_model, train

log = logging.getLogger("patientvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

__all__ = ["run", "main", "derive_child_seed"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patientvae", description="Per-diagnosis VAE synthesis of patient-visit records.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="per-epoch losses at -v")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("infer-schema", help="infer a schema JSON from a CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train one model per diagnosis")
    s.add_argument("--in", dest="input", required=True)
    group = s.add_mutually_exclusive_group(required=True)
    group.add_argument("--diagnosis")
    group.add_argument("--all", action="store_true", help="train every diagnosis; --out is a directory")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=90)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--latent", type=int, default=4)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--snapshots-dir")

    s = sub.add_parser("generate", help="sample synthetic records from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["sample", "argmax"], default="sample")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval-pca", help="2-D PCA scatter of real vs synthetic")
    s.add_argument("--real", required=True)
    s.add_argument("--synthetic", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")

    s = sub.add_parser("eval-discriminator", help="logistic-regression real/synthetic test")
    s.add_argument("--real", required=True)
    s.add_argument("--synthetic", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="marginal statistics, or their difference")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input")
    src.add_argument("--compare", nargs=2, metavar=("A", "B"))
    s.add_argument("--out", required=True)

    s = sub.add_parser("make-toy", help="write a seeded toy dataset")
    s.add_argument("--spec", help="toy spec JSON (default: built-in four-symptom spec)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _write_json(path, obj) -> None:
    _write(path, json.dumps(obj, indent=2) + "\n")


def _read_records(path):
    with open(path, encoding="utf-8", newline="") as fh:
        records, issues = parse_records(fh)
    for issue in issues:
        print(f"{path}: {issue}", file=sys.stderr)
    return records


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def _train_one(args, diagnosis: str, records, out_path) -> None:
    schema = infer_schema(records)
    config = VaeConfig(
        input_dim=schema.layout.total_dim,
        hidden_dim=args.hidden,
        latent_dim=args.latent,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=derive_child_seed(args.seed, diagnosis),
    )
    rng = RandomSource(config.seed)
    model = init_model(config, schema, diagnosis, rng)
    model, trace = train(model, records, rng)
    save_model(model, out_path)
    log.info("%s: final loss %.4f -> %s", diagnosis, trace.epochs[-1].total, out_path)
    if args.snapshots_dir:
        outdir = Path(args.snapshots_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        real = encode_records(records, schema)
        for snap in trace.snapshots:
            scatter = pca_scatter(real, snap.features)
            stem = outdir / f"snapshot.{_safe_name(diagnosis)}.epoch{snap.epoch:03d}"
            _write(f"{stem}.csv", scatter.to_csv())
            _write(f"{stem}.svg", render_scatter_svg(scatter))


def _cmd_train(args) -> int:
    groups = partition_by_diagnosis(_read_records(args.input))
    if args.all:
        if not groups:
            raise PatientVaeError(f"{args.input}: no records")
        os.makedirs(args.out, exist_ok=True)
        for diagnosis in sorted(groups):
            _train_one(args, diagnosis, groups[diagnosis], Path(args.out) / f"model.{_safe_name(diagnosis)}.json")
        return EXIT_OK
    diagnosis = args.diagnosis.strip()
    if diagnosis not in groups:
        raise PatientVaeError(f"{args.input}: no records for diagnosis {diagnosis!r}")
    _train_one(args, diagnosis, groups[diagnosis], args.out)
    return EXIT_OK


def _shared_features(real_path, synth_path):
    real, synth = _read_records(real_path), _read_records(synth_path)
    if not real or not synth:
        raise PatientVaeError("both real and synthetic inputs need at least one valid record")
    schema = infer_schema(real + synth)
    return encode_records(real, schema), encode_records(synth, schema)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "infer-schema":
        records = _read_records(args.input)
        _write(args.out, infer_schema(records).dumps())
    elif cmd == "train":
        return _cmd_train(args)
    elif cmd == "generate":
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        model = load_model(args.model)
        records = generate(model, args.count, RandomSource(args.seed), args.mode)
        _write(args.out, format_records(records))
    elif cmd == "eval-pca":
        scatter = pca_scatter(*_shared_features(args.real, args.synthetic))
        _write(args.out, scatter.to_csv())
        if args.svg:
            _write(args.svg, render_scatter_svg(scatter))
    elif cmd == "eval-discriminator":
        report = fit_discriminator(*_shared_features(args.real, args.synthetic), RandomSource(args.seed))
        _write_json(args.out, report.to_json())
        sys.stdout.write(report.render_table())
    elif cmd == "stats":
        if args.input:
            records = _read_records(args.input)
            _write_json(args.out, marginal_report(records, infer_schema(records)).to_json())
        else:
            a, b = (_read_records(p) for p in args.compare)
            if not a or not b:
                raise PatientVaeError("both inputs need at least one valid record")
            schema = merge_schemas(infer_schema(a), infer_schema(b))
            diff = compare_marginals(marginal_report(a, schema), marginal_report(b, schema))
            _write_json(args.out, diff.to_json())
    elif cmd == "make-toy":
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        if args.spec:
            with open(args.spec, encoding="utf-8") as fh:
                spec = ToySpec.from_json(json.load(fh))
        else:
            spec = default_toy_spec()
        _write(args.out, format_records(generate_toy_dataset(spec, args.count, RandomSource(args.seed))))
    return EXIT_OK


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "patientvae: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"patientvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"patientvae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PatientVaeError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"patientvae: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
