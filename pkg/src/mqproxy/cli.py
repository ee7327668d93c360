"""Command-line entry point: ``mqproxy {bench,evolve,eval,assign,report}``."""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import io
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, baselines, bench, dsl, metrics, netzoo, quant, search


class CommandError(RuntimeError):
    pass


def _seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("EMQ_SEED", 0))


def _cfg_arg(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}; expected e.g. 2,3,4") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_manifest(path: Path, command: str, args: dict, inputs, outputs, started: float) -> None:
    payload = json.dumps(args, sort_keys=True, default=str)
    doc = {
        "command": command,
        "args": json.loads(payload),
        "seeds": {k: v for k, v in args.items() if "seed" in k},
        "config_hash": hashlib.sha256(payload.encode()).hexdigest(),
        "tool_version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
    }
    _write(path, json.dumps(doc, indent=2) + "\n")


# shared context ------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _desk(spec, net_seed, data_seed, n_per_class, epochs, lr, batch_size, train_seed):
    cfg = netzoo.TrainConfig(epochs, lr, batch_size, train_seed)
    return netzoo.desk_setup(spec, net_seed, data_seed, n_per_class, cfg)


@functools.lru_cache(maxsize=8)
def _stats(key, stats_seed, n_probes, batch_size):
    setup = _desk(*key)
    return tuple(netzoo.extract_stats(setup.net, setup.dataset, stats_seed, n_probes, batch_size))


def _desk_key(b: bench.Benchmark) -> tuple:
    m = b.meta
    t = m.get("train", {})
    return (b.net_spec, b.net_seed, int(m.get("data_seed", 0)), int(m.get("n_per_class", 512)),
            int(t.get("epochs", 40)), float(t.get("lr", 0.01)), int(t.get("batch_size", 64)),
            int(t.get("seed", b.net_seed)))


@functools.lru_cache(maxsize=8)
def _load_bench(path: str, mtime: float) -> bench.Benchmark:
    return bench.load(path)


def load_bench(path) -> bench.Benchmark:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"benchmark file {p} does not exist")
    return _load_bench(str(p.resolve()), p.stat().st_mtime)


def context(b: bench.Benchmark, stats_seed: int = 0, n_probes: int = 8, batch_size: int = 64):
    key = _desk_key(b)
    setup = _desk(*key)
    stats = list(_stats(key, stats_seed, n_probes, batch_size))
    ctx = baselines.NetContext.from_dataset(setup.net, setup.dataset, stats_seed, batch_size, n_probes)
    return setup, stats, ctx


def load_genome(path) -> dsl.Genome:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"proxy {path!r} is neither a baseline id nor an existing genome file")
    return dsl.loads(p.read_text(encoding="utf-8"))


def proxy_layer_scores(proxy: str, stats, ctx) -> np.ndarray:
    if proxy in baselines.BASELINES:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return baselines.layer_scores(proxy, stats, ctx)
    scores = dsl.layer_scores(load_genome(proxy), stats)
    if isinstance(scores, dsl.Invalid):
        raise CommandError(f"proxy {proxy} cannot be evaluated on these statistics ({scores.reason})")
    return scores


def proxy_label(proxy: str) -> str:
    return proxy if proxy in baselines.BASELINES or proxy == "oracle" else Path(proxy).stem


# bench ---------------------------------------------------------------------

def cmd_bench_build(a) -> int:
    started = time.time()
    seed = _seed(a.seed)
    train = netzoo.TrainConfig(a.epochs, a.lr, a.batch_size, a.net_seed)
    setup = _desk(a.net, a.net_seed, a.data_seed, a.n_per_class, train.epochs, train.lr, train.batch_size, train.seed)
    space = len(set(a.palette)) ** setup.net.n_layers
    if a.configs > space:
        raise CommandError(f"--configs {a.configs} exceeds the {space} possible configurations")
    meta = {"data_seed": a.data_seed, "n_per_class": a.n_per_class, "float_accuracy": setup.float_accuracy,
            "train": {"epochs": train.epochs, "lr": train.lr, "batch_size": train.batch_size, "seed": train.seed}}
    b = bench.build_benchmark(setup.net, setup.dataset, a.configs, a.palette, seed, a.activation_bits,
                              jobs=a.jobs, meta=meta)
    out = Path(a.out)
    _write(out, bench.dumps(b))
    write_manifest(out.with_suffix(".manifest.json"), "bench build", {**vars(a), "seed": seed, "func": None},
                   [], [out], started)
    print(f"wrote {len(b)} entries to {out} (float accuracy {setup.float_accuracy:.4f})")
    return 0


def cmd_bench_query(a) -> int:
    b = load_bench(a.bench)
    idx = a.idx if a.idx is not None else bench.get_index_by_config(b, a.cfg)
    e = b.entry(idx)
    print(json.dumps({"index": e.index, "bit_cfg": list(e.bit_cfg), "accuracy": e.accuracy,
                      "model_size_mb": e.model_size_mb}))
    return 0


# evolve --------------------------------------------------------------------

def cmd_evolve(a) -> int:
    started = time.time()
    seed = _seed(a.seed)
    b = load_bench(a.bench)
    _, stats, _ = context(b, a.stats_seed)
    cfg = search.SearchConfig(population_size=a.population, iterations=a.iterations, seed=seed,
                              structure=a.structure, osp=not a.no_osp, screening=not a.no_screening,
                              dps=not a.no_dps, max_evaluations=a.max_evaluations, n_eval_cfgs=a.n_eval_cfgs)
    res = search.evolve(cfg, b, stats)
    out = Path(a.out_dir)
    best, hist = out / "best.json", out / "history.csv"
    _write(best, dsl.dumps(res.best.genome))
    _write(hist, search.history_csv(res.history))
    summary = {"validation_fitness": res.best.fitness,
               "test_fitness": search.holdout_fitness(res.best.genome, b, stats),
               "generations": len(res.history) - 1, **res.counters}
    _write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    write_manifest(out / "manifest.json", "evolve", {**vars(a), "seed": seed, "func": None},
                   [a.bench], [best, hist, out / "summary.json"], started)
    print(json.dumps(summary))
    return 0


# eval ----------------------------------------------------------------------

EVAL_FIELDS = ("proxy", "run", "seed", "rho_s@20", "rho_s@50", "rho_s@100", "kendall", "pearson")


def evaluate_proxy(scores, b: bench.Benchmark, test_idx, runs: int, n_cfgs: int, seed: int):
    """Per-run correlation rows plus per-config scoring times (seconds)."""
    rows, times = [], []
    for r in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        idx = sorted(int(i) for i in rng.choice(test_idx, size=min(n_cfgs, len(test_idx)), replace=False))
        gt = b.accuracies(idx)
        cfgs = b.configs(idx)
        t0 = time.perf_counter()
        est = gt.copy() if scores is None else dsl.config_scores(scores, cfgs)
        times.append((time.perf_counter() - t0) / len(idx))
        rows.append([r, seed, *(metrics.spearman_at_topk(gt, est, t) for t in (0.2, 0.5, 1.0)),
                     metrics.kendall(gt, est), metrics.pearson(gt, est)])
    return rows, times


def cmd_eval(a) -> int:
    started = time.time()
    seed = _seed(a.seed)
    b = load_bench(a.bench)
    _, test_idx = b.split()
    needs_stats = any(p != "oracle" for p in a.proxy)
    stats, ctx = (context(b, a.stats_seed)[1:] if needs_stats else (None, None))
    rows, summary, timing = [], [], []
    for proxy in a.proxy:
        label = proxy_label(proxy)
        t0 = time.perf_counter()
        scores = None if proxy == "oracle" else proxy_layer_scores(proxy, stats, ctx)
        layer_time = time.perf_counter() - t0
        runs, times = evaluate_proxy(scores, b, test_idx, a.runs, a.n_cfgs, seed)
        rows += [[label, *r] for r in runs]
        arr = np.array([r[2:] for r in runs])
        summary.append([label, *arr.mean(axis=0), *arr.std(axis=0)])
        timing.append([label, layer_time, float(np.mean(times))])
    out = Path(a.out_dir)
    metric_names = EVAL_FIELDS[3:]
    _write(out / "eval.csv", _csv(EVAL_FIELDS, rows))
    _write(out / "summary.csv", _csv(["proxy", *(f"{m}_mean" for m in metric_names),
                                      *(f"{m}_std" for m in metric_names)], summary))
    # timings vary run to run, so they live apart from the reproducible tables
    _write(out / "timing.csv", _csv(["proxy", "layer_scoring_s", "per_config_scoring_s"], timing))
    write_manifest(out / "manifest.json", "eval", {**vars(a), "seed": seed, "func": None}, [a.bench],
                   [out / "eval.csv", out / "summary.csv", out / "timing.csv"], started)
    sys.stdout.write(_csv(["proxy", *(f"{m}_mean" for m in metric_names), *(f"{m}_std" for m in metric_names)],
                          summary))
    return 0


# assign --------------------------------------------------------------------

def _assign_one(scores, numels, budget, palette, samples, seed, pinned, setup, calib_x, cache):
    cfg = quant.assign_bits(scores, numels, budget, palette, samples, seed, pinned)
    qnet = quant.apply_bit_config(setup.net, cfg, calib_x, 8, cache)
    xe, ye = setup.dataset.part("eval")
    return {"bit_cfg": list(cfg), "model_size_mb": quant.model_size_mb(numels, cfg),
            "accuracy": quant.evaluate_accuracy(qnet, xe, ye), "bops_g": quant.compute_bops(setup.net, cfg, 8),
            "score": dsl.config_score(scores, cfg)}


def cmd_assign(a) -> int:
    started = time.time()
    seed = _seed(a.seed)
    b = load_bench(a.bench)
    setup, stats, ctx = context(b, a.stats_seed)
    scores = proxy_layer_scores(a.proxy, stats, ctx)
    numels = setup.net.numels()
    palette = tuple(a.palette or b.palette)
    n = len(numels)
    pinned = {0: 8, n - 1: 8} if a.pin_first_last else None
    calib_x, _ = netzoo.calibration_batch(setup.dataset, b.meta.get("calib_seed", 0), b.meta.get("calib_batch", 64))
    cache = quant.WeightSchemeCache(setup.net)
    result = _assign_one(scores, numels, a.budget_mb, palette, a.samples, seed, pinned, setup, calib_x, cache)
    result.update(proxy=proxy_label(a.proxy), budget_mb=a.budget_mb)
    out = Path(a.out_dir)
    outputs = [out / "assign.json"]
    _write(out / "assign.json", json.dumps(result, indent=2) + "\n")
    if a.sweep > 1:
        floor = [pinned.get(i, min(palette)) if pinned else min(palette) for i in range(n)]
        lo = quant.model_size_mb(numels, floor)
        hi = quant.model_size_mb(numels, [pinned.get(i, max(palette)) if pinned else max(palette) for i in range(n)])
        rows, last = [], -1.0
        for budget in np.linspace(lo, hi, a.sweep):
            r = _assign_one(scores, numels, float(budget), palette, a.samples, seed, pinned, setup, calib_x, cache)
            if r["model_size_mb"] > last:
                rows.append([float(budget), r["model_size_mb"], r["accuracy"], r["bops_g"],
                             " ".join(map(str, r["bit_cfg"]))])
                last = r["model_size_mb"]
        _write(out / "pareto.csv", _csv(["budget_mb", "model_size_mb", "accuracy", "bops_g", "bit_cfg"], rows))
        outputs.append(out / "pareto.csv")
    write_manifest(out / "manifest.json", "assign", {**vars(a), "seed": seed, "func": None}, [a.bench, a.proxy],
                   outputs, started)
    print(json.dumps(result))
    return 0


# report --------------------------------------------------------------------

def cmd_report(a) -> int:
    started = time.time()
    summaries, histories = [], []
    for d in map(Path, a.inputs):
        if not d.is_dir():
            raise CommandError(f"input directory {d} does not exist")
        found = False
        if (d / "summary.csv").exists():
            summaries.append((d, list(csv.DictReader((d / "summary.csv").open(encoding="utf-8")))))
            found = True
        if (d / "history.csv").exists():
            histories.append((d, list(csv.DictReader((d / "history.csv").open(encoding="utf-8")))))
            found = True
        if not found:
            raise CommandError(f"{d} holds neither summary.csv (eval) nor history.csv (evolve)")
    out = Path(a.out_dir)
    lines = ["# Proxy search report", ""]
    merged = []
    if summaries:
        lines += ["## Correlation on the test split", "",
                  "| source | proxy | rho_s@20 | rho_s@50 | rho_s@100 | kendall | pearson |",
                  "|---|---|---|---|---|---|---|"]
        for d, rows in summaries:
            for r in rows:
                vals = [f"{float(r[m + '_mean']):.4f} ± {float(r[m + '_std']):.4f}" for m in EVAL_FIELDS[3:]]
                lines.append(f"| {d.name} | {r['proxy']} | " + " | ".join(vals) + " |")
                merged.append([d.name, r["proxy"], *(r[m + "_mean"] for m in EVAL_FIELDS[3:]),
                               *(r[m + "_std"] for m in EVAL_FIELDS[3:])])
        lines.append("")
    rejections = []
    if histories:
        lines += ["## Evolution runs", "",
                  "| source | generations | best fitness | sampled | evaluated | conflict | invalid | insensitive | duplicate |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for d, rows in histories:
            last = rows[-1]
            rej = [last["rejected_conflict"], last["rejected_invalid"], last["rejected_insensitive"],
                   last["rejected_duplicate"]]
            lines.append(f"| {d.name} | {last['generation']} | {float(last['best_fitness']):.4f} | "
                         f"{last['sampled_count']} | {last['evaluated_count']} | " + " | ".join(rej) + " |")
            rejections.append([d.name, last["sampled_count"], last["evaluated_count"], *rej])
        lines.append("")
    _write(out / "report.md", "\n".join(lines))
    _write(out / "summary.csv", _csv(["source", "proxy", *(f"{m}_mean" for m in EVAL_FIELDS[3:]),
                                      *(f"{m}_std" for m in EVAL_FIELDS[3:])], merged))
    _write(out / "rejections.csv", _csv(["source", "sampled", "evaluated", "conflict", "invalid", "insensitive",
                                         "duplicate"], rejections))
    write_manifest(out / "manifest.json", "report", {**vars(a), "func": None}, a.inputs,
                   [out / "report.md", out / "summary.csv", out / "rejections.csv"], started)
    print(f"wrote report to {out / 'report.md'}")
    return 0


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqproxy", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_bench=True):
        if with_bench:
            sp.add_argument("--bench", required=True, help="benchmark JSON file")
        sp.add_argument("--seed", type=int, default=None, help="seed (falls back to $EMQ_SEED, then 0)")
        sp.add_argument("--jobs", type=int, default=1, help="maximum worker processes")

    bp = sub.add_parser("bench", help="build or query a benchmark")
    bsub = bp.add_subparsers(dest="action", required=True)
    b = bsub.add_parser("build", help="quantize sampled configs and record accuracy")
    common(b, with_bench=False)
    b.add_argument("--net", default="cnn-s", choices=sorted(netzoo.ARCHITECTURES))
    b.add_argument("--configs", type=int, default=425)
    b.add_argument("--palette", type=_cfg_arg, default=quant.DEFAULT_PALETTE)
    b.add_argument("--activation-bits", type=int, default=8)
    b.add_argument("--net-seed", type=int, default=0)
    b.add_argument("--data-seed", type=int, default=0)
    b.add_argument("--n-per-class", type=int, default=512)
    b.add_argument("--epochs", type=int, default=40)
    b.add_argument("--lr", type=float, default=0.01)
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_build)
    q = bsub.add_parser("query", help="print one benchmark entry as JSON")
    q.add_argument("--bench", required=True)
    g = q.add_mutually_exclusive_group(required=True)
    g.add_argument("--idx", type=int)
    g.add_argument("--cfg", type=_cfg_arg)
    q.set_defaults(func=cmd_bench_query)

    e = sub.add_parser("evolve", help="evolve a proxy against the benchmark")
    common(e)
    e.add_argument("--iterations", type=int, default=200)
    e.add_argument("--population", type=int, default=20)
    e.add_argument("--structure", default="branched", choices=dsl.STRUCTURES)
    e.add_argument("--max-evaluations", type=int, default=None)
    e.add_argument("--n-eval-cfgs", type=int, default=50)
    e.add_argument("--stats-seed", type=int, default=0)
    e.add_argument("--no-osp", action="store_true")
    e.add_argument("--no-dps", action="store_true")
    e.add_argument("--no-screening", action="store_true")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evolve)

    v = sub.add_parser("eval", help="rank correlation of proxies on the test split")
    common(v)
    v.add_argument("--proxy", action="append", required=True,
                   help="baseline id, genome JSON path, or 'oracle'; repeatable")
    v.add_argument("--runs", type=int, default=5)
    v.add_argument("--n-cfgs", type=int, default=50)
    v.add_argument("--stats-seed", type=int, default=0)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("assign", help="pick the best-scoring config under a size budget")
    common(s)
    s.add_argument("--proxy", required=True)
    s.add_argument("--budget-mb", type=float, required=True)
    s.add_argument("--samples", type=int, default=5000)
    s.add_argument("--palette", type=_cfg_arg, default=None)
    s.add_argument("--pin-first-last", action="store_true", help="keep first and last layers at 8 bits")
    s.add_argument("--sweep", type=int, default=0, help="budgets in the Pareto sweep (0 disables)")
    s.add_argument("--stats-seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_assign)

    r = sub.add_parser("report", help="merge eval and evolve outputs")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, KeyError, OSError, search.SearchError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
