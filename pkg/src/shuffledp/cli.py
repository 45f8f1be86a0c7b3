"""Command-line interface.

One binary, subcommand style. Every run that writes artifacts also writes a
run manifest (<artifact>.manifest.json) recording the subcommand, resolved
arguments, seed, tool version, output paths, and wall-clock time, atomically,
so any output can be regenerated from its manifest alone.

Exit codes: 0 success, 2 flag/usage errors (argparse), 3 unreadable or
invalid config/data, 4 infeasible privacy budget. Failures print a single
machine-parsable line `error: <category>: <message>` on stderr.

The default output directory is the current one; set SHUFFLEDP_OUT_DIR to
redirect relative output paths.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import (
    Budget,
    InfeasibleBudgetError,
    MechanismSpec,
    certified_epsilon_single,
    solve_sigma,
)
from .audit import bootstrap_crossfit, crossfit_epsilon, dirac_canary_trials
from .lognormal import fw_approx, mc_sum_cdf
from .model import build_model, load_model_config, save_weights
from .permute import invariant_groups, log_permutation_count, sample_permutation
from .toyexp import GridSpec, mixture_distance
from .trainer import TrainConfig, accuracy, load_csv, make_blobs, mean_loss, train

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_INFEASIBLE = 4


def _out_path(path_str: str) -> Path:
    path = Path(path_str)
    if not path.is_absolute():
        base = os.environ.get("SHUFFLEDP_OUT_DIR", "")
        if base:
            path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(artifact: Path, subcommand: str, resolved: dict, seed, outputs, elapsed: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "resolved_config": resolved,
        "seed": seed,
        "tool_version": __version__,
        "output_paths": [str(p) for p in outputs],
        "wall_clock_seconds": elapsed,
    }
    target = artifact.with_name(artifact.name + ".manifest.json")
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    os.replace(tmp, target)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]
            )


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v]


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v]


def cmd_sigma(args) -> int:
    budget = Budget(args.eps, args.delta)
    sigma = solve_sigma(
        budget, args.c, args.c_prime, args.d, args.p, args.steps,
        shuffled=not args.unshuffled,
    )
    print(f"{sigma:.10g}")
    return EXIT_OK


def cmd_curve(args) -> int:
    t0 = time.monotonic()
    out = _out_path(args.out)
    rows = []
    for eps in _float_list(args.eps_list):
        budget = Budget(eps, args.delta)
        s_sh = solve_sigma(budget, args.c, args.c_prime, args.d, args.p, args.steps, shuffled=True)
        s_un = solve_sigma(budget, args.c, args.c_prime, args.d, args.p, args.steps, shuffled=False)
        rows.append((eps, s_sh, s_un))
    _write_csv(out, ["epsilon", "sigma_shuffled", "sigma_unshuffled"], rows)
    _write_manifest(out, "curve", vars(args), None, [out], time.monotonic() - t0)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    t0 = time.monotonic()
    out = _out_path(args.out)
    rows = []
    for d in _int_list(args.d_list):
        for eps in _float_list(args.eps_list):
            budget = Budget(eps, args.delta)
            # d = 1 denotes the unshuffled mechanism column.
            sigma = solve_sigma(
                budget, args.c, args.c_prime, max(d, 2), args.p, args.steps,
                shuffled=d > 1,
            )
            rows.append((d, eps, sigma))
    _write_csv(out, ["d", "epsilon", "sigma"], rows)
    _write_manifest(out, "heatmap", vars(args), None, [out], time.monotonic() - t0)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_lognormal_compare(args) -> int:
    t0 = time.monotonic()
    out = _out_path(args.out)
    sigma2 = args.sigma * args.sigma
    mus = np.zeros(args.d)
    samples = mc_sum_cdf(mus, sigma2, args.draws, args.seed)
    fit = fw_approx(mus, sigma2)
    # Quantile-based evaluation grid over the sampled range.
    qs = np.linspace(0.001, 0.999, min(args.draws, 400))
    xs = np.quantile(samples, qs)
    cdf_mc = np.searchsorted(samples, xs, side="right") / samples.size
    cdf_fw = fit.cdf(xs)
    _write_csv(out, ["x", "cdf_fw", "cdf_mc"], list(zip(xs, cdf_fw, cdf_mc)))
    _write_manifest(out, "lognormal-compare", vars(args), args.seed, [out], time.monotonic() - t0)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_toy_distance(args) -> int:
    from .toyexp import density_grid

    t0 = time.monotonic()
    grid = GridSpec(lo=-10.0, hi=10.0, points_per_axis=args.grid)
    c1 = np.array(_float_list(args.c1))
    c2 = np.array(_float_list(args.c2))
    d_un = mixture_distance(c1, c2, args.sigma, grid, shuffled=False)
    d_sh = mixture_distance(c1, c2, args.sigma, grid, shuffled=True)
    ratio = d_un / d_sh if d_sh > 0 else math.inf
    print(f"distance_unshuffled {d_un:.6g}")
    print(f"distance_shuffled {d_sh:.6g}")
    print(f"ratio {ratio:.6g}")
    if args.out:
        out = _out_path(args.out)
        axis = grid.axis()
        grids = {
            "pdf_c1_plain": density_grid(c1, args.sigma, grid, shuffled=False),
            "pdf_c2_plain": density_grid(c2, args.sigma, grid, shuffled=False),
            "pdf_c1_shuffled": density_grid(c1, args.sigma, grid, shuffled=True),
            "pdf_c2_shuffled": density_grid(c2, args.sigma, grid, shuffled=True),
        }
        rows = []
        for iy, yv in enumerate(axis):
            for ix, xv in enumerate(axis):
                rows.append(
                    (xv, yv) + tuple(g[iy, ix] for g in grids.values())
                )
        _write_csv(out, ["x", "y", *grids.keys()], rows)
        _write_manifest(out, "toy-distance", vars(args), None, [out], time.monotonic() - t0)
    return EXIT_OK


def _load_train_data(spec: str, features_needed: int | None = None):
    if spec.startswith("synthetic:"):
        params = {}
        for part in spec[len("synthetic:"):].split(","):
            if part:
                k, v = part.split("=")
                params[k.strip()] = v.strip()
        return make_blobs(
            n=int(params.get("n", 256)),
            features=int(params.get("features", 16)),
            classes=int(params.get("classes", 2)),
            seed=int(params.get("seed", 0)),
            spread=float(params.get("spread", 1.0)),
        )
    return load_csv(spec)


def cmd_train(args) -> int:
    t0 = time.monotonic()
    doc = load_model_config(args.config)
    x, y = _load_train_data(args.data)
    model_cfg = doc["model"] if "model" in doc else doc
    tr = doc.get("train", {})

    def pick(flag, key, default=None):
        if flag is not None:
            return flag
        if key in tr:
            return tr[key]
        if default is None:
            raise KeyError(f"missing train setting {key!r}")
        return default

    config = TrainConfig(
        budget=Budget(float(pick(args.eps, "epsilon")), float(pick(args.delta, "delta"))),
        c=float(pick(args.c, "c")),
        c_prime=float(pick(args.c_prime, "c_prime")),
        batch_size=int(pick(args.batch_size, "batch_size")),
        dataset_size=x.shape[0],
        steps=int(pick(args.steps, "steps")),
        lr=float(pick(args.lr, "lr")),
        seed=int(pick(args.seed, "seed", 0)),
        shuffle=not args.no_shuffle,
        loss=str(pick(None, "loss", "xent")),
        model_config=model_cfg,
    )
    model = build_model(model_cfg)
    result = train(config, model, x, y)

    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "weights.bin"
    save_weights(weights_path, result.model)
    log_path = out_dir / "steps.jsonl"
    with open(log_path, "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")
    summary = {
        "final_loss": mean_loss(result.model, x, y, config.loss),
        "final_accuracy": accuracy(result.model, x, y) if config.loss == "xent" else None,
        "sigma": result.sigma,
        "sigma0": result.sigma0,
        "path": "shuffled" if result.shuffled_path else "fallback",
        "groups": [
            {"kind": g.kind, "log_permutation_count": g.log_permutation_count()}
            for g in result.groups
        ],
        "shuffle_enabled": config.shuffle,
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    _write_manifest(
        summary_path, "train", {**vars(args), "train_config": str(config)},
        config.seed, [weights_path, log_path, summary_path], time.monotonic() - t0,
    )
    print(f"wrote {out_dir} (path={summary['path']}, sigma={result.sigma:.4g}, sigma0={result.sigma0:.4g})")
    return EXIT_OK


def cmd_audit(args) -> int:
    t0 = time.monotonic()
    spec = MechanismSpec(sigma=args.sigma, c=args.c, c_prime=args.c_prime, d=args.d)
    rng = np.random.default_rng(args.seed)
    present, absent = dirac_canary_trials(spec, args.trials, rng, shuffled=not args.unshuffled)
    eps_emp, thresholds = crossfit_epsilon(present, absent, args.delta, min_error=args.min_error)
    ci = bootstrap_crossfit(
        present, absent, args.delta, min_error=args.min_error, seed=args.seed + 1
    )
    eps_theory = certified_epsilon_single(
        args.sigma, args.c, args.c_prime, args.d, args.delta, shuffled=not args.unshuffled
    )
    report = {
        "sigma": args.sigma,
        "delta": args.delta,
        "d": args.d,
        "trials": args.trials,
        "shuffled": not args.unshuffled,
        "eps_theoretical": eps_theory,
        "eps_empirical": eps_emp,
        "bootstrap_ci_99": list(map(float, ci)),
        "thresholds": [None if t is None else float(t) for t in thresholds],
    }
    out = _out_path(args.out)
    out.write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out, "audit", vars(args), args.seed, [out], time.monotonic() - t0)
    print(json.dumps(report))
    return EXIT_OK


def cmd_invariance_check(args) -> int:
    from .model import forward_sample, per_sample_gradients
    from .nn import iter_arrays

    doc = load_model_config(args.config)
    model_cfg = doc["model"] if "model" in doc else doc
    model = build_model(model_cfg)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(4, model.input_dim))
    targets = rng.normal(size=(4, model.output_dim))

    base_out = np.stack([forward_sample(model, row)[0] for row in x])
    base_psg, _ = per_sample_gradients(model, x, targets, "mse")

    # Shuffle each group with a recorded permutation, then carry the base
    # gradients into the same frame; equivariance means they should match the
    # permuted model's own gradients.
    groups = invariant_groups(model)
    perms = []
    for group in groups:
        perm = group.sample(rng)
        group.apply(perm, group.tensors())
        perms.append(perm)
    perm_out = np.stack([forward_sample(model, row)[0] for row in x])
    perm_psg, _ = per_sample_gradients(model, x, targets, "mse")

    fwd_dev = float(np.max(np.abs(base_out - perm_out)))
    bwd_dev = 0.0
    for g_base, g_perm in zip(base_psg.grads, perm_psg.grads):
        for group, perm, block_base, block_perm in zip(groups, perms, g_base, g_perm):
            carried = _copy_structure(block_base)
            group.apply(perm, carried)
            for a, b in zip(iter_arrays(carried), iter_arrays(block_perm)):
                bwd_dev = max(bwd_dev, float(np.max(np.abs(a - b))))
    print(f"max_forward_deviation {fwd_dev:.3e}")
    print(f"max_backward_deviation {bwd_dev:.3e}")
    print(f"log_permutation_count {log_permutation_count(model):.6g}")
    return EXIT_OK


def _copy_structure(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, dict):
        return {k: _copy_structure(v) for k, v in obj.items()}
    return [_copy_structure(v) for v in obj]


def shuffle_bench(n: int, reps: int, seed: int = 0, dtype=np.float32) -> dict:
    """Time the index-gather row+column shuffle of an n-by-n matrix.

    Returns per-rep times and their median; the gather runs row-by-row into a
    preallocated buffer so each source row stays cache-resident during its
    column gather.
    """
    if n < 1 or reps < 1:
        raise ValueError("n and reps must be positive")
    rng = np.random.default_rng(seed)
    try:
        matrix = np.arange(n * n, dtype=dtype).reshape(n, n)
        out = np.empty_like(matrix)
    except MemoryError as exc:
        raise MemoryError(f"cannot allocate two {n}x{n} matrices") from exc
    times = []
    rows = cols = None
    for _ in range(reps):
        rows = sample_permutation(n, rng)
        cols = np.asarray(sample_permutation(n, rng), dtype=np.intp)
        t0 = time.perf_counter()
        for i in range(n):
            np.take(matrix[rows[i]], cols, out=out[i])
        times.append(time.perf_counter() - t0)
    return {
        "n": n,
        "reps": reps,
        "times_ms": [t * 1e3 for t in times],
        "median_ms": sorted(times)[len(times) // 2] * 1e3,
        "matrix": matrix,
        "shuffled": out,
        "rows": rows,
        "cols": cols,
    }


def cmd_shuffle_bench(args) -> int:
    report = shuffle_bench(args.n, args.reps, args.seed)
    print(f"index-gather shuffle of {args.n}x{args.n}: median {report['median_ms']:.3f} ms "
          f"over {args.reps} reps")
    print("note: wall-clock timing on this host's single-threaded numpy; "
          "compare ratios across methods, not absolute milliseconds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shuffledp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_accountant_flags(p):
        p.add_argument("--delta", type=float, required=True)
        p.add_argument("--c", type=float, default=1.0)
        p.add_argument("--c-prime", dest="c_prime", type=float, default=1.0)
        p.add_argument("--p", type=float, required=True)
        p.add_argument("--steps", type=int, required=True)

    p = sub.add_parser("sigma", help="solve the per-step noise multiplier")
    p.add_argument("--eps", type=float, required=True)
    add_accountant_flags(p)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--unshuffled", action="store_true")
    p.set_defaults(func=cmd_sigma)

    p = sub.add_parser("curve", help="sigma vs epsilon table (shuffled and unshuffled)")
    add_accountant_flags(p)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--eps-list", default="0.25,0.5,1,2,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("heatmap", help="sigma over a (d, epsilon) grid; d=1 means unshuffled")
    add_accountant_flags(p)
    p.add_argument("--d-list", required=True)
    p.add_argument("--eps-list", default="0.25,0.5,1,2,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("lognormal-compare", help="lognormal-sum fit vs Monte-Carlo CDF")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lognormal_compare)

    p = sub.add_parser("toy-distance", help="grid distance of shuffled vs plain Gaussian pairs")
    p.add_argument("--c1", default="-2,0")
    p.add_argument("--c2", default="2,0")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_toy_distance)

    p = sub.add_parser("train", help="run shuffled DPSGD")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="csv path or synthetic:n=..,features=..")
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--c-prime", dest="c_prime", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-shuffle", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="one-step canary audit of the mechanism")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--c-prime", dest="c_prime", type=float, default=1.0)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--min-error", dest="min_error", type=float, default=4e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unshuffled", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("invariance-check", help="forward/backward deviation under shuffling")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_invariance_check)

    p = sub.add_parser("shuffle-bench", help="time the index-gather matrix shuffle")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shuffle_bench)

    return parser


_VECTOR_FLAGS = {"--c1", "--c2"}


def _merge_vector_flags(argv):
    """Fold `--c1 -2,0` into `--c1=-2,0` so argparse does not read the value
    as an option string."""
    merged = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _VECTOR_FLAGS and i + 1 < len(argv):
            merged.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            merged.append(tok)
            i += 1
    return merged


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(_merge_vector_flags(list(argv)))
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: infeasible-budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
