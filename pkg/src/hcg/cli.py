"""``hcg`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import graph as hg
from .drelu import cbsr_to_dense, drelu_forward
from .errors import CorruptSection, FormatVersionMismatch, HcgError
from .gradcheck import gradient_check, random_network, selection_margin
from .kernels import dr_spmm_forward, max_merge, max_merge_backward, spmm_oracle, sspmm
from .model import TrainConfig, save_checkpoint, train
from .scheduler import (
    DEFAULT_THRESHOLDS,
    K_CANDIDATES,
    SCHEMA_VERSION,
    KProfile,
    PipelineInputs,
    available_workers,
    profile_k,
    run_pipeline,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _thresholds(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("thresholds take two values: LOW_MAX,MED_MAX")
    return tuple(vals)


def resolve_workers(flag: int | None) -> int:
    if flag is None:
        env = os.environ.get("HCG_WORKERS")
        if env:
            try:
                flag = int(env)
            except ValueError:
                raise UsageError(f"HCG_WORKERS={env!r} is not an integer")
        else:
            flag = available_workers()
    if flag < 1:
        raise UsageError("worker count must be >= 1")
    return flag


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=2))


def _read_graph(path) -> hg.HeteroGraph:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such graph file: {path}")
    return hg.load(path)


# -- generate / stats -------------------------------------------------------


def cmd_generate(args) -> int:
    if args.preset:
        spec = hg.preset_spec(args.preset, args.scale, args.d_cell, args.d_net, args.seed,
                              args.skew)
    else:
        if args.n_cell is None or args.n_net is None:
            raise UsageError("give --preset or both --n-cell and --n-net")
        spec = hg.SyntheticSpec(args.n_cell, args.n_net, args.d_cell, args.d_net,
                                args.near_mean, args.pin_mean, args.skew, args.seed)
    g = hg.generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hg.save(g, out)
    stats_path = Path(args.stats_out) if args.stats_out else out.with_suffix(out.suffix + ".stats.json")
    hg.write_stats(g, stats_path)
    s = hg.stats(g)
    print(f"wrote {out}: {g.n_cell} cells, {g.n_net} nets, "
          + ", ".join(f"{et} nnz {s.edges[et].nnz}" for et in hg.EDGE_TYPES))
    return EXIT_OK


def cmd_stats(args) -> int:
    g = _read_graph(args.graph)
    text = json.dumps(hg.stats(g).to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


# -- verify -----------------------------------------------------------------


def _rel(a, b) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _verify_kernels(g, rng, dims: int, workers: int) -> list[dict]:
    checks = []
    oracle_err, adjoint_err, mask_ok = 0.0, 0.0, True
    for et in hg.EDGE_TYPES:
        src, _ = hg.ENDPOINTS[et]
        x = g.features(src)[:, :dims]
        a, a_t = g.adj[et], g.adj_t[et]
        for k in (2, 4, 8):
            if k > x.shape[1]:
                continue
            cb = drelu_forward(x, k)
            y = dr_spmm_forward(a, cb, workers=workers)
            oracle_err = max(oracle_err, _rel(y, spmm_oracle(a, cbsr_to_dense(cb))))
            dy = rng.standard_normal(y.shape)
            lhs = float(np.sum(y * dy))
            rhs = float(np.sum(sspmm(a_t, dy, cb, workers=workers) * cb.values))
            adjoint_err = max(adjoint_err, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    for _ in range(10):
        shape = (g.n_cell, dims)
        y_near = rng.integers(-3, 4, shape).astype(float)  # integer grid forces ties
        y_pinned = rng.integers(-3, 4, shape).astype(float)
        _, m = max_merge(y_near, y_pinned)
        d = rng.standard_normal(shape)
        a_near, a_pinned = max_merge_backward(d, m)
        mask_ok &= bool(np.array_equal(a_near + a_pinned, d))
    checks.append({"name": "oracle_equivalence", "max_error": oracle_err, "tolerance": 1e-9,
                   "passed": oracle_err <= 1e-9})
    checks.append({"name": "adjoint_identity", "max_error": adjoint_err, "tolerance": 1e-9,
                   "passed": adjoint_err <= 1e-9})
    checks.append({"name": "mask_conservation", "max_error": 0.0 if mask_ok else 1.0,
                   "tolerance": 0.0, "passed": mask_ok})
    return checks


def _verify_fd(g, seed: int) -> dict:
    sub = hg.induced_subgraph(g, min(g.n_cell, 40), min(g.n_net, 25),
                              min(g.d_cell, 6), min(g.d_net, 6))
    if sub.labels is None:
        sub = sub.replace(labels=np.random.default_rng(seed).random(sub.n_cell))
    k = {"pins": 3, "near": 3, "pinned": 3}
    for attempt in range(20):
        net = random_network(sub.d_cell, sub.d_net, k, hidden=8, seed=seed + attempt)
        if selection_margin(net, sub) > 1e-4:
            break
    errs = gradient_check(net, sub)
    worst = max(errs.values())
    return {"name": "finite_difference", "max_error": worst, "tolerance": 1e-5,
            "passed": worst <= 1e-5, "per_array": errs,
            "margin": selection_margin(net, sub)}


def cmd_verify(args) -> int:
    report = {"graph": str(args.graph), "checks": []}
    try:
        g = _read_graph(args.graph)
    except (CorruptSection, FormatVersionMismatch) as e:
        report["checks"].append({"name": "load", "passed": False, "detail": str(e)})
        return _finish_verify(args, report)
    violations = hg.validate(g)
    report["checks"].append({"name": "validate", "passed": not violations,
                             "violations": [{"kind": v.kind, "detail": v.detail} for v in violations]})
    if not violations:
        rng = np.random.default_rng(args.seed)
        report["checks"].extend(_verify_kernels(g, rng, args.dims, args.workers))
        if args.fd_check:
            report["checks"].append(_verify_fd(g, args.seed))
    return _finish_verify(args, report)


def _finish_verify(args, report) -> int:
    ok = all(c["passed"] for c in report["checks"])
    report["passed"] = ok
    for c in report["checks"]:
        line = f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}"
        if "max_error" in c:
            line += f" max_error={c['max_error']:.3e}"
        for v in c.get("violations", []):
            line += f"\n    {v['kind']}: {v['detail']}"
        if "detail" in c:
            line += f" ({c['detail']})"
        print(line)
    if args.out:
        _write_json(Path(args.out), report)
    return EXIT_OK if ok else EXIT_FAIL


# -- profile-k / bench ------------------------------------------------------


def cmd_profile_k(args) -> int:
    g = _read_graph(args.graph)
    prof = profile_k(g, args.candidates, args.reps, args.workers, args.thresholds, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prof.save_json(out / "k_profile.json")
    prof.write_csv(out / "k_sweep.csv")
    for et, p in prof.edges.items():
        sweep = " ".join(f"k={k}:{t * 1e3:.2f}ms" for k, t in sorted(p.runtimes.items()))
        print(f"{et}: chosen k={p.chosen_k}  [{sweep}]")
    return EXIT_OK


def _bench_k(args, g) -> dict:
    if args.profile:
        k = KProfile.load_json(args.profile).chosen()
    else:
        k = {"pins": args.k, "near": args.k, "pinned": args.k}
    return {et: min(v, g.features(hg.ENDPOINTS[et][0]).shape[1]) for et, v in k.items()}


def cmd_bench(args) -> int:
    g = _read_graph(args.graph)
    k = _bench_k(args, g)
    modes = ("sequential", "parallel") if args.mode == "both" else (args.mode,)
    rng = np.random.default_rng(args.seed)
    d_cell = rng.standard_normal((g.n_cell, g.d_cell))
    d_net = rng.standard_normal((g.n_net, g.d_cell))
    weights = None
    if g.d_cell != g.d_net:
        weights = {et: rng.standard_normal((g.features(hg.ENDPOINTS[et][0]).shape[1], g.d_cell))
                   for et in hg.EDGE_TYPES}
    inputs = PipelineInputs(k, d_cell, d_net, weights)
    run_pipeline(g, inputs, "sequential", args.workers, args.thresholds)  # warm-up

    rows, reports = [], {}
    for mode in modes:
        walls = []
        for rep in range(args.reps):
            _, rep_report = run_pipeline(g, inputs, mode, args.workers, args.thresholds)
            walls.append(rep_report.wall)
            for et, ph in rep_report.phases.items():
                for phase, sec in ph.items():
                    rows.append([mode, rep, et, k[et], phase, sec])
            rows.append([mode, rep, "all", "", "merge", rep_report.merge])
            rows.append([mode, rep, "all", "", "wall", rep_report.wall])
            reports.setdefault(mode, []).append(rep_report)
    for et in hg.EDGE_TYPES:
        x = g.features(hg.ENDPOINTS[et][0])
        dense = cbsr_to_dense(drelu_forward(x, k[et]))
        t = time.perf_counter()
        spmm_oracle(g.adj[et], dense)
        rows.append(["dense", 0, et, k[et], "fwd", time.perf_counter() - t])

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "rep", "edge_type", "k", "phase", "seconds"])
        w.writerows(rows)

    summary = {}
    for mode, reps in reports.items():
        median = sorted(reps, key=lambda r: r.wall)[len(reps) // 2]
        summary[mode] = {**median.to_dict(), "median_wall": median.wall}
        del summary[mode]["schema_version"]
    doc = {"k": k, "workers": args.workers, "reps": args.reps, "modes": summary}
    if "sequential" in summary and "parallel" in summary:
        ratio = summary["parallel"]["median_wall"] / summary["sequential"]["median_wall"]
        doc["parallel_over_sequential"] = ratio
        doc["host_cores"] = available_workers()
        doc["few_cores"] = doc["host_cores"] < 4
    _write_json(out / "pipeline_report.json", doc)

    any_report = next(iter(reports.values()))[0]
    with open(out / "workload.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["edge_type", "k", "max_row_workload", "mean_row_workload", "p_max", "t_avail"])
        for et, wl in any_report.workload.items():
            w.writerow([et, wl["k"], wl["max_row_workload"], wl["mean_row_workload"],
                        wl["p_max"], wl["t_avail"]])

    for mode, s in summary.items():
        ph = s["phases"]
        parts = " ".join(f"{et}:{sum(ph[et].values()) * 1e3:.1f}ms" for et in hg.EDGE_TYPES)
        print(f"{mode}: wall {s['median_wall'] * 1e3:.1f}ms overlap {s['overlap_ratio']:.2f}  [{parts}]")
    if "parallel_over_sequential" in doc:
        print(f"parallel/sequential = {doc['parallel_over_sequential']:.3f}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def cmd_train(args) -> int:
    graphs = [_read_graph(p) for p in args.graphs]
    k_edges = KProfile.load_json(args.k_profile).chosen() if args.k_profile else None
    cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                      optimizer=args.optimizer, seed=args.seed, hidden=args.hidden,
                      k_cell=args.k_cell, k_net=args.k_net, k_edges=k_edges,
                      holdout_fraction=args.holdout, drelu_mode=args.drelu_mode)
    result = train(graphs, cfg, workers=args.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out / "model.hcmd")
    with open(out / "losses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(result.losses))
    _write_json(out / "metrics.json", {
        "metrics": {k: v for k, v in result.metrics.to_dict().items() if k != "schema_version"},
        "per_graph": [{k: v for k, v in r.to_dict().items() if k != "schema_version"}
                      for r in result.per_graph],
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "epochs": cfg.epochs,
        "config": {"lr": cfg.lr, "weight_decay": cfg.weight_decay, "optimizer": cfg.optimizer,
                   "seed": cfg.seed, "hidden": cfg.hidden, "k": result.net.layers[0].k,
                   "holdout_fraction": cfg.holdout_fraction, "drelu_mode": cfg.drelu_mode},
    })
    m = result.metrics
    print(f"loss {result.losses[0]:.5f} -> {result.losses[-1]:.5f}  "
          f"pearson {m.pearson:.3f} spearman {m.spearman:.3f} kendall {m.kendall:.3f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcg", description="Heterogeneous circuit-graph kernels and pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=True):
        sp.add_argument("--seed", type=int, default=0)
        if workers:
            sp.add_argument("--workers", type=int, default=None,
                            help="kernel threads (default: $HCG_WORKERS or available cores)")
            sp.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS,
                            metavar="LOW,MED", help="degree bucket upper bounds")

    sp = sub.add_parser("generate", help="write a synthetic graph and its stats")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats-out")
    sp.add_argument("--preset", choices=sorted(hg.PRESETS))
    sp.add_argument("--scale", type=float, default=1.0)
    sp.add_argument("--n-cell", type=int)
    sp.add_argument("--n-net", type=int)
    sp.add_argument("--d-cell", type=int, default=64)
    sp.add_argument("--d-net", type=int, default=64)
    sp.add_argument("--near-mean", type=float, default=43.5)
    sp.add_argument("--pin-mean", type=float, default=2.16)
    sp.add_argument("--skew", type=float, default=0.5)
    common(sp, workers=False)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("stats", help="print degree statistics as JSON")
    sp.add_argument("graph")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("verify", help="structural checks plus kernel property suites")
    sp.add_argument("graph")
    sp.add_argument("--out", help="JSON report path")
    sp.add_argument("--dims", type=int, default=16, help="feature columns used by kernel checks")
    sp.add_argument("--fd-check", action="store_true", help="also run finite differences")
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("profile-k", help="sweep k per edge type")
    sp.add_argument("graph")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--candidates", type=_int_list, default=list(K_CANDIDATES))
    sp.add_argument("--reps", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_profile_k)

    sp = sub.add_parser("bench", help="time sequential and parallel pipelines")
    sp.add_argument("graph")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--mode", choices=("sequential", "parallel", "both"), default="both")
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--profile", help="k_profile.json whose chosen k to use")
    sp.add_argument("--reps", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train", help="train the two-layer model")
    sp.add_argument("graphs", nargs="+")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--lr", type=float, default=0.0002)
    sp.add_argument("--weight-decay", type=float, default=0.00001)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sp.add_argument("--hidden", type=int, default=64)
    sp.add_argument("--k-cell", type=int, default=8)
    sp.add_argument("--k-net", type=int, default=8)
    sp.add_argument("--k-profile", help="k_profile.json; overrides --k-cell/--k-net per edge")
    sp.add_argument("--holdout", type=float, default=0.0)
    sp.add_argument("--drelu-mode", choices=("literal", "nonneg"), default="literal")
    common(sp)
    sp.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if hasattr(args, "workers"):
            args.workers = resolve_workers(args.workers)
        return args.func(args)
    except UsageError as e:
        print(f"hcg: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CorruptSection, FormatVersionMismatch) as e:
        print(f"hcg: {e}", file=sys.stderr)
        return EXIT_IO
    except (HcgError, ValueError) as e:
        print(f"hcg: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
