"""Command-line harness: generate clouds, train models, estimate LID,
run benchmark grids, dump error-bundle spectra, and count operations.

Exit codes: 0 success, 2 usage/config error, 3 training failure,
4 capability mismatch. Output files are byte-deterministic for a fixed
seed unless --timings is passed (which records wall-clock fields).
"""

import argparse
import json
import os
import resource
import sys
from dataclasses import asdict

import numpy as np

from . import estimators, manifolds, nonparametric, oracle_scores, score_model
from .errors import (
    CapabilityError,
    ConfigError,
    FormatError,
    LidkitError,
    TrainingDivergedError,
    UnsupportedFamilyError,
)
from .estimators import EstimatorParams, LIDReport
from .numerics import RngStream

BENCH_HEADER = ("manifold,d,n,estimator,sigma,m,mae,mean,stddev,"
                "score_evals,jvp_evals,runtime_ms")


# ---------------------------------------------------------------------------
# shared helpers


def _add_oracle_args(sub):
    sub.add_argument("--oracle", choices=["affine", "mixture"],
                     help="closed-form score field matching the cloud's generator")
    sub.add_argument("--checkpoint", help="trained model checkpoint (LIDM1)")
    sub.add_argument("--d", type=int, help="intrinsic dimension of the oracle frame")
    sub.add_argument("--gen-seed", type=int, default=0,
                     help="seed the cloud was generated with")
    sub.add_argument("--permute-dims", action="store_true")
    sub.add_argument("--anchors", type=int, default=4)
    sub.add_argument("--anchor-scale", type=float, default=1.0)


def _oracle_spec(args, cloud) -> manifolds.ManifoldSpec:
    if args.oracle == "affine":
        if args.d is None:
            raise ConfigError("--oracle affine requires --d")
        return manifolds.ManifoldSpec(
            "affine_gaussian", d=args.d, n=cloud.ambient_dim, N=cloud.n_points,
            seed=args.gen_seed, permute_dims=args.permute_dims)
    return manifolds.ManifoldSpec(
        "point_mixture", d=0, n=cloud.ambient_dim, N=cloud.n_points,
        seed=args.gen_seed, permute_dims=args.permute_dims,
        anchors=args.anchors, anchor_scale=args.anchor_scale)


def _build_field(args, cloud):
    if args.checkpoint:
        return estimators.ModelField(score_model.load_checkpoint(args.checkpoint))
    if args.oracle:
        return estimators.OracleField(
            oracle_scores.oracle_for(_oracle_spec(args, cloud)))
    raise ConfigError("need --oracle or --checkpoint")


def _write_lines(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    spec = manifolds.ManifoldSpec(
        family=args.family, d=args.d, n=args.n, N=args.N, seed=args.seed,
        permute_dims=args.permute_dims, radius=args.radius, height=args.height,
        anchors=args.anchors, anchor_scale=args.anchor_scale)
    spec.validate()
    cloud = manifolds.sample(spec)
    manifolds.save_cloud(cloud, args.out)
    print(f"wrote {args.out}: family={spec.family} d={spec.d} n={spec.n} "
          f"N={spec.N} seed={spec.seed}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cloud = manifolds.load_cloud(args.cloud)
    config = score_model.MLPConfig(
        input_dim=cloud.ambient_dim, width=args.width, depth=args.depth,
        target=args.target)
    train_cfg = score_model.TrainConfig(
        batches=args.batches, batch_size=args.batch_size, lr=args.lr,
        lr_min=args.lr_min, sigma_min=args.sigma_min, sigma_max=args.sigma_max,
        seed=args.seed)
    model = score_model.init_model(config, seed=args.seed)
    model, losses = score_model.train(model, cloud, train_cfg)
    score_model.save_checkpoint(model, args.out)
    trace_path = args.loss_trace or f"{args.out}.loss.csv"
    _write_lines(trace_path,
                 ["batch,loss"] + [f"{i},{float(v)!r}"
                                   for i, v in enumerate(losses)])
    tail = losses[-min(500, len(losses)):]
    print(f"wrote {args.out}: params={model.param_count} "
          f"final_loss={np.mean(tail):.6g}")
    return 0


# ---------------------------------------------------------------------------
# estimate


def _esm_report(field, oracle_field, cloud, params) -> LIDReport:
    values, scores = [], []
    for i in range(cloud.n_points):
        fork, ofork = field.fork(), oracle_field.fork()
        values.append(estimators.esm_loss(fork, ofork, cloud.points[i],
                                          params, point_index=i))
        scores.append(fork.counters.score_evals)
    zeros = np.zeros(cloud.n_points, dtype=np.int64)
    return LIDReport(estimator="esm", params=asdict(params),
                     estimates=np.array(values), true_lid=None,
                     score_evals=np.array(scores, dtype=np.int64),
                     jvp_evals=zeros)


def cmd_estimate(args) -> int:
    cloud = manifolds.load_cloud(args.cloud)
    if args.estimator in nonparametric.NONPARAMETRIC_ESTIMATORS:
        report = nonparametric.estimate_cloud(
            cloud, args.estimator,
            nonparametric.NeighborhoodParams(k=args.k))
    else:
        params = EstimatorParams(
            sigma=args.sigma, m=args.m, divergence=args.divergence,
            hutchinson_k=args.hutchinson_k, tau=args.tau, seed=args.seed,
            flipd_noised=args.flipd_noised)
        if args.estimator == "esm":
            if not (args.checkpoint and args.oracle):
                raise CapabilityError(
                    "esm needs a model (--checkpoint) and a true-score "
                    "oracle (--oracle)")
            field = estimators.ModelField(
                score_model.load_checkpoint(args.checkpoint))
            oracle_field = estimators.OracleField(
                oracle_scores.oracle_for(_oracle_spec(args, cloud)))
            report = _esm_report(field, oracle_field, cloud, params)
        else:
            field = _build_field(args, cloud)
            report = estimators.estimate_cloud(field, cloud, args.estimator,
                                               params)
    estimators.write_report_csv(report, f"{args.out}.csv")
    estimators.write_report_json(report, f"{args.out}.json",
                                 include_runtime=args.timings)
    mae = report.mae()
    mae_text = "n/a" if mae is None else f"{mae:.4f}"
    print(f"wrote {args.out}.csv/.json: estimator={report.estimator} "
          f"mean={report.mean():.4f} mae={mae_text}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_cell(cloud, field, estimator, params) -> LIDReport:
    return estimators.estimate_cloud(field, cloud, estimator, params)


def _fmt(value) -> str:
    return "" if value is None else f"{value:.4f}"


def cmd_bench(args) -> int:
    with open(args.config) as fh:
        cfg = json.load(fh)
    seed = int(cfg.get("seed", 0))
    man_specs = [manifolds.ManifoldSpec(**entry)
                 for entry in cfg.get("manifolds", [])]
    est_names = list(cfg.get("estimators", []))
    sigmas = [float(s) for s in cfg.get("sigmas", [])]
    k_values = [int(k) for k in cfg.get("k", [50, 100])]
    m = int(cfg.get("m", 8))
    tau = float(cfg.get("tau", 0.1))
    divergence = cfg.get("divergence", "exact")
    field_kind = cfg.get("field", "oracle")
    score_names = [e for e in est_names if e in estimators.CLOUD_ESTIMATORS]
    np_names = [e for e in est_names
                if e in nonparametric.NONPARAMETRIC_ESTIMATORS]
    unknown = set(est_names) - set(score_names) - set(np_names)
    if unknown:
        raise ConfigError(f"unknown estimators in config: {sorted(unknown)}")
    if not man_specs or not est_names or (score_names and not sigmas):
        raise ConfigError("benchmark grid is empty")

    os.makedirs(args.out, exist_ok=True)
    rows, failures, columns = [], [], {}
    for spec in man_specs:
        spec.validate()
        label = f"{spec.family} d={spec.d} n={spec.n}"
        cloud = manifolds.sample(spec)
        field = None
        field_error = None
        if score_names:
            try:
                if field_kind == "oracle":
                    field = estimators.OracleField(oracle_scores.oracle_for(spec))
                elif field_kind == "train":
                    tr = dict(cfg.get("train", {}))
                    config = score_model.MLPConfig(
                        input_dim=spec.n, width=int(tr.pop("width", 256)),
                        depth=int(tr.pop("depth", 4)))
                    train_cfg = score_model.TrainConfig(
                        seed=tr.pop("seed", seed), **tr)
                    model = score_model.init_model(config, seed=train_cfg.seed)
                    model, _ = score_model.train(model, cloud, train_cfg)
                    field = estimators.ModelField(model)
                else:
                    raise ConfigError(f"unknown field kind {field_kind!r}")
            except (UnsupportedFamilyError, TrainingDivergedError) as exc:
                field_error = exc
        for name in score_names:
            for sigma in sigmas:
                cell = f"{name} s={sigma:g}"
                if field_error is not None:
                    failures.append((label, cell, str(field_error)))
                    rows.append(f"{label.replace(' ', '_')},{spec.d},{spec.n},"
                                f"{name},{sigma:g},{m},,,,,,")
                    continue
                try:
                    params = EstimatorParams(sigma=sigma, m=m, tau=tau,
                                             divergence=divergence, seed=seed)
                    report = _bench_cell(cloud, field.fork(), name, params)
                except (LidkitError, RuntimeError) as exc:
                    failures.append((label, cell, str(exc)))
                    rows.append(f"{label.replace(' ', '_')},{spec.d},{spec.n},"
                                f"{name},{sigma:g},{m},,,,,,")
                    continue
                runtime = report.runtime_ms if args.timings else 0.0
                rows.append(
                    f"{label.replace(' ', '_')},{spec.d},{spec.n},{name},"
                    f"{sigma:g},{m},{report.mae():.6f},{report.mean():.6f},"
                    f"{report.stddev():.6f},{int(np.sum(report.score_evals))},"
                    f"{int(np.sum(report.jvp_evals))},{runtime:g}")
                columns.setdefault(cell, {})[label] = report.mae()
        for name in np_names:
            for k in k_values:
                cell = f"{name} k={k}"
                try:
                    report = nonparametric.estimate_cloud(
                        cloud, name, nonparametric.NeighborhoodParams(k=k))
                except LidkitError as exc:
                    failures.append((label, cell, str(exc)))
                    rows.append(f"{label.replace(' ', '_')},{spec.d},{spec.n},"
                                f"{name}_k{k},,,,,,,,")
                    continue
                runtime = report.runtime_ms if args.timings else 0.0
                rows.append(
                    f"{label.replace(' ', '_')},{spec.d},{spec.n},{name}_k{k},"
                    f",,{report.mae():.6f},{report.mean():.6f},"
                    f"{report.stddev():.6f},0,0,{runtime:g}")
                columns.setdefault(cell, {})[label] = report.mae()

    _write_lines(f"{args.out}/bench.csv", [BENCH_HEADER] + rows)

    labels = [f"{s.family} d={s.d} n={s.n}" for s in man_specs]
    col_names = list(columns)
    width = max((len(x) for x in labels + ["Average"]), default=8) + 2
    table = ["LID estimate mean absolute error",
             "manifold".ljust(width) + "  ".join(c.rjust(14) for c in col_names)]
    for label in labels:
        cells = [_fmt(columns[c].get(label)).rjust(14) for c in col_names]
        table.append(label.ljust(width) + "  ".join(cells))
    averages = []
    for c in col_names:
        vals = [v for v in columns[c].values() if v is not None]
        averages.append(_fmt(float(np.mean(vals)) if vals else None).rjust(14))
    table.append("Average".ljust(width) + "  ".join(averages))
    _write_lines(f"{args.out}/table.txt", table)

    for label, cell, msg in failures:
        print(f"warning: {label} / {cell} failed: {msg}", file=sys.stderr)
    print(f"wrote {args.out}/bench.csv ({len(rows)} rows, "
          f"{len(failures)} failures)")
    if rows and len(failures) == len(rows):
        return 1
    return 0


# ---------------------------------------------------------------------------
# spectrum


def cmd_spectrum(args) -> int:
    cloud = manifolds.load_cloud(args.cloud)
    field = _build_field(args, cloud)
    m_list = [int(v) for v in args.m_list.split(",") if v]
    if not m_list:
        raise ConfigError("--m-list must name at least one sample count")
    x = cloud.points[args.point]
    lines = ["m,rank,eigenvalue"]
    for m in m_list:
        params = EstimatorParams(sigma=args.sigma, m=m, seed=args.seed)
        spectrum = estimators.error_bundle_spectrum(
            field.fork(), x, params, point_index=args.point)
        value = estimators.dsm_lid(field.fork(), x, params,
                                   point_index=args.point)
        for rank, eig in enumerate(spectrum.eigenvalues, start=1):
            lines.append(f"{m},{rank},{float(eig)!r}")
        gap = abs(float(np.sum(spectrum.eigenvalues)) - value)
        status = "ok" if gap <= 1e-9 else "MISMATCH"
        print(f"m={m} trace={spectrum.trace:.6f} dsm={value:.6f} "
              f"|diff|={gap:.2e} {status}")
    _write_lines(args.out, lines)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# scaling


def cmd_scaling(args) -> int:
    d_list = [int(v) for v in args.d_list.split(",") if v]
    if not d_list:
        raise ConfigError("--d-list must name at least one dimension")
    header = "d,n,estimator,m,score_evals,jvp_evals"
    if args.timings:
        header += ",peak_rss_kb"
    lines = [header]
    for d in d_list:
        n = 2 * d
        spec = manifolds.ManifoldSpec("affine_gaussian", d=d, n=n,
                                      N=args.points, seed=args.seed)
        cloud = manifolds.sample(spec)
        oracle = oracle_scores.oracle_for(spec)
        grid = [
            ("dsm", EstimatorParams(sigma=args.sigma, m=args.m, seed=args.seed)),
            ("flipd_exact", EstimatorParams(sigma=args.sigma, m=args.m,
                                            divergence="exact", seed=args.seed)),
            ("flipd_hutchinson", EstimatorParams(
                sigma=args.sigma, m=args.m, divergence="hutchinson",
                hutchinson_k=args.hutchinson_k, seed=args.seed)),
        ]
        for name, params in grid:
            field = estimators.OracleField(oracle)
            estimator = "dsm" if name == "dsm" else "flipd"
            report = estimators.estimate_cloud(field, cloud, estimator, params)
            # per-point counts; identical across points by construction
            score_evals = int(report.score_evals[0])
            jvp_evals = int(report.jvp_evals[0])
            row = f"{d},{n},{name},{args.m},{score_evals},{jvp_evals}"
            if args.timings:
                row += f",{resource.getrusage(resource.RUSAGE_SELF).ru_maxrss}"
            lines.append(row)
    _write_lines(args.out, lines)
    print(f"wrote {args.out} ({len(lines) - 1} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser / entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidkit",
        description="LID estimation from score fields on synthetic manifolds")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="sample a benchmark point cloud")
    gen.add_argument("--family", required=True, choices=manifolds.FAMILIES)
    gen.add_argument("--d", type=int, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--N", type=int, default=2000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--permute-dims", action="store_true")
    gen.add_argument("--radius", type=float, default=1.0)
    gen.add_argument("--height", type=float, default=0.3)
    gen.add_argument("--anchors", type=int, default=4)
    gen.add_argument("--anchor-scale", type=float, default=1.0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    tr = subs.add_parser("train", help="train the score MLP on a cloud")
    tr.add_argument("--cloud", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--loss-trace")
    tr.add_argument("--batches", type=int, default=20000)
    tr.add_argument("--batch-size", type=int, default=100)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lr-min", type=float, default=1e-5)
    tr.add_argument("--sigma-min", type=float, default=0.005)
    tr.add_argument("--sigma-max", type=float, default=1.0)
    tr.add_argument("--width", type=int, default=256)
    tr.add_argument("--depth", type=int, default=4)
    tr.add_argument("--target", choices=["epsilon", "velocity"],
                    default="epsilon")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    est = subs.add_parser("estimate", help="run one estimator over a cloud")
    est.add_argument("--cloud", required=True)
    _add_oracle_args(est)
    est.add_argument("--estimator", required=True,
                     choices=list(estimators.CLOUD_ESTIMATORS) + ["esm"]
                     + list(nonparametric.NONPARAMETRIC_ESTIMATORS))
    est.add_argument("--sigma", type=float, default=0.05)
    est.add_argument("--m", type=int, default=8)
    est.add_argument("--tau", type=float, default=0.1)
    est.add_argument("--divergence", choices=["exact", "hutchinson"],
                     default="exact")
    est.add_argument("--hutchinson-k", type=int, default=64)
    est.add_argument("--flipd-noised", action="store_true")
    est.add_argument("--k", type=int, default=50)
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--timings", action="store_true")
    est.add_argument("--out", required=True)
    est.set_defaults(func=cmd_estimate)

    be = subs.add_parser("bench", help="run a benchmark grid from a config")
    be.add_argument("--config", required=True)
    be.add_argument("--out", required=True)
    be.add_argument("--timings", action="store_true")
    be.set_defaults(func=cmd_bench)

    sp = subs.add_parser("spectrum", help="error-bundle spectra at one point")
    sp.add_argument("--cloud", required=True)
    _add_oracle_args(sp)
    sp.add_argument("--point", type=int, default=0)
    sp.add_argument("--m-list", default="8,64,256")
    sp.add_argument("--sigma", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_spectrum)

    sc = subs.add_parser("scaling",
                         help="operation counters across problem sizes")
    sc.add_argument("--d-list", default="8,16,32,64")
    sc.add_argument("--sigma", type=float, default=0.05)
    sc.add_argument("--m", type=int, default=8)
    sc.add_argument("--points", type=int, default=1)
    sc.add_argument("--hutchinson-k", type=int, default=64)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--timings", action="store_true")
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_scaling)
    return parser


def _root_cause(exc: BaseException) -> BaseException:
    seen = exc
    while seen.__cause__ is not None:
        seen = seen.__cause__
    return seen


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # map to documented exit codes
        cause = _root_cause(exc)
        print(f"error: {cause}", file=sys.stderr)
        if isinstance(cause, TrainingDivergedError):
            return 3
        if isinstance(cause, CapabilityError):
            return 4
        if isinstance(cause, (ConfigError, FormatError, UnsupportedFamilyError,
                              ValueError, OSError, json.JSONDecodeError)):
            return 2
        raise


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
