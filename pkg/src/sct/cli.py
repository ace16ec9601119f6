"""Command-line surface: order, fit, sample, score, exceed, roundtrip-check.

Exit codes: 0 success, 2 invalid inputs or configuration, 3 numerical
failure, 4 malformed files. Fit traces are line-delimited key=value
records so shell tools can follow long runs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile

import numpy as np

from .errors import NumericalError, SCTError, ValidationError
from .geometry import maximin_order
from .io import (
    Ensemble,
    ModelConfig,
    ingest_csv,
    load_model,
    read_ensemble,
    read_noise,
    save_model,
    write_ensemble,
    write_noise,
)
from .model import (
    exceedance_map,
    fit_model,
    global_quantile,
    log_density,
    log_score,
    sample,
)

__all__ = ["main"]


def _read_fields(path, metric: str) -> Ensemble:
    if str(path).endswith(".csv"):
        return ingest_csv(path, metric=metric)
    return read_ensemble(path)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def cmd_order(args) -> int:
    ens = _read_fields(args.data, args.metric)
    ordering = maximin_order(ens.locs)
    rows = []
    for pos, idx in enumerate(ordering.order):
        delta = "" if pos == 0 else repr(float(ordering.min_dists[pos - 1]))
        x, y = ens.locs.coords[idx]
        rows.append([pos, int(idx), repr(float(x)), repr(float(y)), delta])
    _write_csv(args.out, ["position", "index", "x", "y", "delta"], rows)
    print(f"ordered {ens.L} locations -> {args.out}")
    return 0


def cmd_fit(args) -> int:
    config = ModelConfig.from_file(args.config) if args.config else ModelConfig()
    if args.explain_config:
        print(config.explain())
        return 0
    if args.data is None or args.out is None:
        raise ValidationError("fit requires --data and --out")
    ens = _read_fields(args.data, args.metric)

    trace_file = open(args.trace, "w", encoding="utf-8") if args.trace else None

    def on_iteration(record):
        if trace_file is not None:
            line = " ".join(f"{k}={v}" for k, v in record.items())
            trace_file.write(line + "\n")
            trace_file.flush()

    try:
        model = fit_model(
            ens.values, ens.locs, on_iteration=on_iteration,
            **config.fit_kwargs(),
        )
    finally:
        if trace_file is not None:
            trace_file.close()
    save_model(args.out, model)
    info = model.fit_info
    theta = " ".join(f"{t:.4g}" for t in info["theta"])
    print(
        f"fitted {ens.N} replicates at {ens.L} locations -> {args.out}\n"
        f"config fingerprint {model.fingerprint}\n"
        f"stage-1 objective {info['stage1_objective_initial']:.6g} -> "
        f"{info['stage1_objective_final']:.6g} "
        f"({info['stage1_iterations']} iterations)\n"
        f"transport theta [{theta}]"
    )
    return 0


def cmd_sample(args) -> int:
    model = load_model(args.model)
    if args.common_noise:
        noise = read_noise(args.common_noise)
        count = noise.shape[0] if args.count is None else args.count
        if noise.shape != (count, model.L):
            raise ValidationError(
                f"noise file has shape {noise.shape}, need ({count}, {model.L})"
            )
    else:
        noise = None
        count = args.count
        if count is None:
            raise ValidationError("sample requires -n when no noise file is given")
    fields, used = sample(
        model, count, seed=args.seed, noise=noise, return_noise=True
    )
    if args.save_noise:
        write_noise(args.save_noise, used)
    write_ensemble(args.out, Ensemble(model.locs, fields))
    print(f"wrote {count} sampled fields at {model.L} locations -> {args.out}")
    return 0


def cmd_score(args) -> int:
    model = load_model(args.model)
    labels = args.split_ids or [os.path.basename(p) for p in args.data]
    if len(labels) != len(args.data):
        raise ValidationError(
            f"{len(args.split_ids)} split ids for {len(args.data)} data files"
        )
    rows = []
    reports = []
    for label, path in zip(labels, args.data):
        ens = _read_fields(path, args.metric)
        if not np.array_equal(ens.locs.coords, model.locs.coords):
            raise ValidationError(
                f"{path}: locations differ from the model's training locations"
            )
        rep = log_score(model, ens.values, split_id=label)
        reports.append(rep)
        for i, ld in enumerate(rep.log_densities):
            rows.append([label, i, repr(float(ld))])
        print(
            f"split={label} n={rep.n_replicates} "
            f"mean_negative_log_score={rep.mean_negative_log_score:.6f} "
            f"adjustment_global={rep.adjustment_global:.6f} "
            f"adjustment_locationwise={rep.adjustment_locationwise:.6f} "
            f"saturated={rep.saturation_count}"
        )
    if args.out:
        _write_csv(args.out, ["split", "replicate", "log_density"], rows)
    if len(reports) > 1:
        mean = float(np.mean([r.mean_negative_log_score for r in reports]))
        print(f"mean over {len(reports)} splits: {mean:.6f}")
    return 0


def cmd_exceed(args) -> int:
    if (args.threshold is None) == (args.threshold_quantile is None):
        raise ValidationError(
            "exceed needs exactly one of --threshold or --threshold-quantile"
        )
    if args.threshold_quantile is not None:
        if args.threshold_data is None:
            raise ValidationError("--threshold-quantile requires --threshold-data")
        ref = _read_fields(args.threshold_data, args.metric)
        threshold = global_quantile(ref.values, args.threshold_quantile)
        print(f"threshold = global {args.threshold_quantile} quantile = "
              f"{threshold:.6f}")
    else:
        threshold = args.threshold

    if (args.model is None) == (args.data is None):
        raise ValidationError("exceed needs exactly one of --model or --data")
    if args.model is not None:
        model = load_model(args.model)
        probs = exceedance_map(
            model, threshold, args.direction, count=args.count, seed=args.seed
        )
        coords = model.locs.coords
    else:
        ens = _read_fields(args.data, args.metric)
        probs = exceedance_map(ens.values, threshold, args.direction)
        coords = ens.locs.coords
    rows = [
        [i, repr(float(x)), repr(float(y)), repr(float(p))]
        for i, ((x, y), p) in enumerate(zip(coords, probs))
    ]
    _write_csv(args.out, ["index", "x", "y", "probability"], rows)
    print(f"wrote {len(rows)} exceedance probabilities -> {args.out}")
    return 0


def cmd_roundtrip_check(args) -> int:
    model = load_model(args.model)
    ens = _read_fields(args.data, args.metric)
    if not np.array_equal(ens.locs.coords, model.locs.coords):
        raise ValidationError(
            f"{args.data}: locations differ from the model's training locations"
        )
    Y = ens.values
    failures = []

    def check(name, value, tol):
        status = "PASS" if value <= tol else "FAIL"
        print(f"check={name} max_err={value:.3e} tol={tol:.0e} status={status}")
        if status == "FAIL":
            failures.append(name)

    z1 = model.to_reference(Y)
    y2 = model.from_reference(z1)
    z2 = model.to_reference(y2)
    check("reference-roundtrip", float(np.max(np.abs(z2 - z1))), args.tol_z)
    check(
        "data-roundtrip",
        float(np.max(np.abs(y2 - Y) / (1.0 + np.abs(Y)))),
        args.tol_y,
    )

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.sct")
        save_model(path, model)
        clone = load_model(path)
    check(
        "serialization-score",
        float(np.max(np.abs(log_density(model, Y) - log_density(clone, Y)))),
        args.tol_score,
    )

    draws = sample(model, 20, seed=0)
    ld = log_density(model, draws)
    check(
        "sample-density-finite",
        0.0 if np.all(np.isfinite(ld)) else np.inf,
        0.0,
    )
    if failures:
        raise NumericalError(f"round-trip checks failed: {', '.join(failures)}")
    print("all checks passed")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sct",
        description="Fit, sample, and score composite-transformation "
        "models of spatial field ensembles.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_metric(sp):
        sp.add_argument(
            "--metric", default="chordal-sphere",
            choices=("chordal-sphere", "euclidean-plane"),
            help="distance metric used when ingesting CSV data",
        )

    sp = sub.add_parser("order", help="write the maximin ordering as CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    add_metric(sp)
    sp.set_defaults(func=cmd_order)

    sp = sub.add_parser("fit", help="fit a model and persist it")
    sp.add_argument("--config", help="key=value config file; defaults used if omitted")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--trace", help="write per-iteration key=value records here")
    sp.add_argument(
        "--explain-config", action="store_true",
        help="print every config key with value, default, and meaning, then exit",
    )
    add_metric(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("sample", help="generate fields from a fitted model")
    sp.add_argument("--model", required=True)
    sp.add_argument("-n", "--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--common-noise", help="read reference noise from this file")
    sp.add_argument("--save-noise", help="write the consumed noise here")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("score", help="predictive log scores on holdout data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--split-ids", nargs="*")
    sp.add_argument("--out", help="per-replicate log densities as CSV")
    add_metric(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("exceed", help="per-location exceedance probabilities")
    sp.add_argument("--model")
    sp.add_argument("--data", help="use these samples instead of drawing")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--threshold-quantile", type=float)
    sp.add_argument("--threshold-data",
                    help="pooled ensemble defining the quantile threshold")
    sp.add_argument("--direction", choices=("above", "below"), default="above")
    sp.add_argument("-n", "--count", type=int, default=500)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    add_metric(sp)
    sp.set_defaults(func=cmd_exceed)

    sp = sub.add_parser(
        "roundtrip-check",
        help="verify inversion and serialization invariants on a fitted model",
    )
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tol-z", type=float, default=1e-6)
    sp.add_argument("--tol-y", type=float, default=1e-4)
    sp.add_argument("--tol-score", type=float, default=1e-12)
    add_metric(sp)
    sp.set_defaults(func=cmd_roundtrip_check)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SCTError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
