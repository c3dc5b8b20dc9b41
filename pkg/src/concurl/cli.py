"""Command-line experiment runner.

Subcommands: train, eval, sweep, synth-demo, diversity. Settings resolve as
command-line flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .dataio import Dataset, load_feature_dataset, make_gaussian_blobs, parse_synth_spec
from .metrics import MetricReport, argmax_assignment, confusion_percentages
from .softclust import sinkhorn_codes, soft_assign
from .trainer import TrainConfig, diversity, evaluate_state, fit, load_checkpoint

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("concurl")

# flag name -> TrainConfig field
FLAG_FIELDS = {
    "seed": "seed",
    "epochs": "epochs",
    "alpha": "alpha",
    "beta": "beta",
    "ensemble_size": "ensemble_size",
    "ensemble_kind": "ensemble_kind",
    "proj_dim": "proj_dim",
    "tau_id": "tau_id",
    "tau_cluster": "tau_cluster",
    "epsilon": "epsilon",
    "sinkhorn_iters": "sinkhorn_iters",
    "lr": "lr",
    "batch_size": "batch_size",
    "clusters": "K",
    "eval_every": "eval_every",
}

GRID_ALIASES = {"M": "ensemble_size", "d_out": "proj_dim", "tau": "tau_id", "l": "lr"}


class CLIError(Exception):
    pass


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise CLIError(f"{path}: config must be flat key = value pairs (found tables {nested})")
    return data


def build_config(args, extra: Optional[dict] = None) -> TrainConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    if extra:
        values.update(extra)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as e:
        raise CLIError(str(e)) from None


def dataset_from_source(source: dict) -> Dataset:
    if "synth" in source:
        return parse_synth_spec(source["synth"])
    return load_feature_dataset(source["path"])


def source_from_args(args) -> dict:
    if getattr(args, "dataset", None) and getattr(args, "synth", None):
        raise CLIError("give either --dataset or --synth, not both")
    if getattr(args, "dataset", None):
        return {"path": str(Path(args.dataset).resolve())}
    if getattr(args, "synth", None):
        return {"synth": args.synth}
    raise CLIError("a dataset is required (--dataset CSV or --synth SPEC)")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_report(report: MetricReport, out_dir: Path) -> None:
    (out_dir / "metrics.json").write_text(report.to_json())
    with (out_dir / "confusion.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true_class"] + [f"cluster_for_class_{j}" for j in range(report.k)])
        for i, row in enumerate(report.matched_confusion):
            w.writerow([i, *row.tolist()])
    pct = confusion_percentages(report.matched_confusion[report.matched_confusion.sum(1) > 0])
    with (out_dir / "confusion_percent.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in pct:
            w.writerow(row.tolist())


def run_training(cfg: TrainConfig, source: dict, out_dir) -> dict:
    """Train into ``out_dir``; returns the final manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = dataset_from_source(source)
    resolved = cfg.resolved(ds)
    manifest = {
        "version": __version__,
        "config": resolved.to_dict(),
        "config_hash": resolved.hash(),
        "seeds": {"seed": resolved.seed},
        "dataset": {"source": source, **ds.fingerprint()},
        "start_time": _now(),
        "end_time": None,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    state, _ = fit(resolved, ds, run_dir=out_dir)
    if ds.labels is not None:
        write_report(evaluate_state(state, ds), out_dir)
    manifest["end_time"] = _now()
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    cfg = build_config(args)
    run_training(cfg, source_from_args(args), args.out)
    print(f"run written to {args.out}")
    return 0


def _checkpoint_and_dataset(args):
    if getattr(args, "run", None):
        run = Path(args.run)
        manifest = json.loads((run / "manifest.json").read_text())
        ckpt = Path(args.checkpoint) if args.checkpoint else run / "final.npz"
        source = manifest["dataset"]["source"]
        if args.dataset or args.synth:
            source = source_from_args(args)
        return load_checkpoint(ckpt), dataset_from_source(source)
    if not args.checkpoint:
        raise CLIError("give --checkpoint or --run")
    return load_checkpoint(args.checkpoint), dataset_from_source(source_from_args(args))


def cmd_eval(args) -> int:
    state, ds = _checkpoint_and_dataset(args)
    if state.encoder.sizes[0] != ds.dim:
        raise CLIError(f"checkpoint expects {state.encoder.sizes[0]} input features, dataset has {ds.dim}")
    if ds.labels is None:
        raise CLIError("evaluation needs a labeled dataset")
    report = evaluate_state(state, ds)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out)
    print(report.to_json())
    return 0


def expand_grid(spec: str) -> Dict[str, list]:
    """``"tau_id=0.3,0.5;lr=0.03;M=0,4;d_out=16"`` -> ordered {field: values}.

    ``eta=...`` gives ensemble sizes round(exp(eta)).
    """
    grid: Dict[str, list] = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, _, vals = part.partition("=")
        key = key.strip()
        raw = [v.strip() for v in vals.split(",") if v.strip()]
        if not raw:
            raise CLIError(f"grid entry {key!r} has no values")
        if key == "eta":
            grid["ensemble_size"] = [int(round(math.exp(float(v)))) for v in raw]
            continue
        name = GRID_ALIASES.get(key, key)
        ftypes = {f.name: f.type for f in fields(TrainConfig)}
        if name not in ftypes:
            raise CLIError(f"unknown grid key {key!r}")
        conv = int if name in ("ensemble_size", "proj_dim", "batch_size", "epochs", "seed") else float
        grid[name] = [conv(v) for v in raw]
    if not grid:
        raise CLIError("empty sweep grid")
    return grid


def _run_trial(job):
    idx, cfg_dict, source, out_dir = job
    try:
        run_training(TrainConfig.from_dict(cfg_dict), source, out_dir)
        report = json.loads((Path(out_dir) / "metrics.json").read_text())
        return idx, "ok", report["acc"], report["nmi"], report["ari"], ""
    except Exception as e:  # a failed trial is recorded and the sweep goes on
        return idx, "failed", None, None, None, f"{type(e).__name__}: {e}"


def conditional_means(rows: List[dict], keys: Sequence[str]):
    """Marginal and pairwise-conditional accuracy means over the other hyperparameters."""
    ok = [r for r in rows if r["status"] == "ok"]
    marg, cond = [], []
    for h in keys:
        for v in sorted({r[h] for r in ok}):
            accs = [r["acc"] for r in ok if r[h] == v]
            marg.append({"param": h, "value": v, "mean_acc": float(np.mean(accs)),
                         "std_acc": float(np.std(accs)), "n": len(accs)})
    for hi, hj in itertools.permutations(keys, 2):
        for vi, vj in sorted({(r[hi], r[hj]) for r in ok}):
            accs = [r["acc"] for r in ok if r[hi] == vi and r[hj] == vj]
            cond.append({"param": hi, "value": vi, "given": hj, "given_value": vj,
                         "mean_acc": float(np.mean(accs)), "std_acc": float(np.std(accs)), "n": len(accs)})
    return marg, cond


def _write_csv(path: Path, rows: List[dict], header: Sequence[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def cmd_sweep(args) -> int:
    base = build_config(args)
    grid = expand_grid(args.grid)
    source = source_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    combos = list(itertools.product(*grid.values()))
    jobs = []
    for i, combo in enumerate(combos):
        d = base.to_dict()
        d.update(dict(zip(keys, combo)))
        d["seed"] = base.seed + i
        jobs.append((i, d, source, str(out / f"trial_{i:04d}")))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            results = list(ex.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    rows = []
    for (i, status, acc, nmi_, ari_, err), combo in zip(sorted(results), combos):
        rows.append({"trial": i, **dict(zip(keys, combo)), "seed": base.seed + i,
                     "status": status, "acc": acc, "nmi": nmi_, "ari": ari_, "error": err})
    _write_csv(out / "sweep_summary.csv", rows, ["trial", *keys, "seed", "status", "acc", "nmi", "ari", "error"])
    marg, cond = conditional_means(rows, keys)
    _write_csv(out / "sweep_marginals.csv", marg, ["param", "value", "mean_acc", "std_acc", "n"])
    _write_csv(out / "sweep_conditional.csv", cond,
               ["param", "value", "given", "given_value", "mean_acc", "std_acc", "n"])
    accs = [r["acc"] for r in rows if r["status"] == "ok"]
    counts, edges = np.histogram(accs, bins=args.bins, range=(0.0, 1.0))
    _write_csv(out / "sweep_hist.csv",
               [{"bin_lo": edges[i], "bin_hi": edges[i + 1], "count": int(c)} for i, c in enumerate(counts)],
               ["bin_lo", "bin_hi", "count"])
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} trials, {failed} failed; summary in {out / 'sweep_summary.csv'}")
    return 0


def synth_demo(seed: int = 0, tau: float = 1.0, epsilon: float = 0.05, sinkhorn_iters: int = 3,
               n_rows: int = 4, margin: float = 0.1) -> dict:
    """Soft assignments of a 3-blob 2-D set before and after one random 2x2 projection.

    The centered, normalized points act as embeddings and the cluster
    centroids as prototypes.
    """
    ds = make_gaussian_blobs(3, 50, 2, spread=0.3, separation=4.0, seed=7)
    x = ds.features - ds.features.mean(0)
    C = np.stack([x[ds.labels == c].mean(0) for c in range(3)], axis=1)
    rng = np.random.default_rng(seed)
    A = rng.normal(scale=np.sqrt(0.5), size=(2, 2))
    p = soft_assign(x, C, tau).P
    pt = soft_assign(x @ A.T, A @ C, tau).P
    q = sinkhorn_codes(x, C, epsilon, sinkhorn_iters).q_rows
    rows = np.sort(rng.choice(ds.n, size=n_rows, replace=False))

    top2 = np.sort(p, axis=1)[:, -2:]
    confident = rows[(top2[rows, 1] - top2[rows, 0]) > margin]
    checks = {
        "argmax_preserved": bool(np.array_equal(p[rows].argmax(1), pt[rows].argmax(1))),
        "confident_codes_one_hot": bool(np.all(q[confident].max(1) >= 0.99)),
        "p_rows_sum_to_one": bool(np.allclose(p.sum(1), 1.0, atol=1e-12)),
    }
    return {
        "rows": rows, "p": p[rows], "p_tilde": pt[rows], "q": q[rows],
        "projection": A,
        "mean_abs_diff": float(np.abs(p[rows] - pt[rows]).mean()),
        "argmax_agreement_all": float((p.argmax(1) == pt.argmax(1)).mean()),
        "code_argmax": argmax_assignment(q[rows]),
        "checks": checks,
    }


def cmd_synth_demo(args) -> int:
    res = synth_demo(seed=args.seed, tau=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    K = res["p"].shape[1]
    with (out / "demo_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point"] + [f"p_{j}" for j in range(K)] + [f"p_tilde_{j}" for j in range(K)]
                   + [f"q_{j}" for j in range(K)])
        for i, r in enumerate(res["rows"]):
            w.writerow([int(r), *map(repr, res["p"][i].tolist()), *map(repr, res["p_tilde"][i].tolist()),
                        *map(repr, res["q"][i].tolist())])
    summary = {k: res[k] for k in ("mean_abs_diff", "argmax_agreement_all", "checks")}
    summary["projection"] = res["projection"].tolist()
    (out / "demo_summary.json").write_text(json.dumps(summary, indent=2))
    np.set_printoptions(precision=4, suppress=False)
    for i, r in enumerate(res["rows"]):
        print(f"point {r:3d}  p={res['p'][i]}  p~={res['p_tilde'][i]}  q={res['q'][i]}")
    failed = [k for k, ok in res["checks"].items() if not ok]
    if failed:
        print(f"demo checks failed: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_diversity(args) -> int:
    """Pairwise-NMI diversity per saved checkpoint (run dir) or for one checkpoint."""
    if args.run:
        run = Path(args.run)
        manifest = json.loads((run / "manifest.json").read_text())
        source = source_from_args(args) if (args.dataset or args.synth) else manifest["dataset"]["source"]
        ckpts = sorted(run.glob("ckpt_epoch*.npz"))
    else:
        if not args.checkpoint:
            raise CLIError("give --checkpoint or --run")
        source = source_from_args(args)
        ckpts = [Path(args.checkpoint)]
    ds = dataset_from_source(source)
    series = []
    for ck in ckpts:
        state = load_checkpoint(ck)
        if len(state.ensemble) < 2:
            raise CLIError(f"{ck}: ensemble has {len(state.ensemble)} transforms, need >= 2")
        mean, std = diversity(state, ds)
        series.append({"epoch": state.epoch, "pairwise_nmi_mean": mean, "pairwise_nmi_std": std})
    text = json.dumps(series, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------- parser

def _add_dataset_flags(p, required=False):
    p.add_argument("--dataset", help="CSV file with header f0,...,f{F-1}[,label]")
    p.add_argument("--synth", help="synthetic dataset, e.g. blobs:k=3,n=50,dim=2")


def _add_train_flags(p):
    p.add_argument("--config", help="flat TOML file of training settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--ensemble-kind", dest="ensemble_kind", choices=["gaussian_projection", "diagonal", "mixed"])
    p.add_argument("--proj-dim", dest="proj_dim", type=int)
    p.add_argument("--tau-id", dest="tau_id", type=float)
    p.add_argument("--tau-cluster", dest="tau_cluster", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--clusters", type=int, help="number of prototypes K (default: number of classes)")
    p.add_argument("--eval-every", dest="eval_every", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="concurl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-means evaluation of a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--run", help="run directory; dataset taken from its manifest unless given")
    _add_dataset_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of independent training runs")
    _add_dataset_flags(p)
    _add_train_flags(p)
    p.add_argument("--grid", required=True, help='e.g. "tau_id=0.3,0.5;lr=0.03;M=0,4;d_out=32"')
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-demo", help="soft assignments before/after a random projection")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_synth_demo)

    p = sub.add_parser("diversity", help="pairwise NMI across the transform ensemble")
    p.add_argument("--checkpoint")
    p.add_argument("--run")
    _add_dataset_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diversity)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
