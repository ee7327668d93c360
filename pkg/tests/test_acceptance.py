"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import itertools
import json
import warnings

import numpy as np
import pytest

from mqproxy import baselines, cli, dsl, hessian, metrics, quant, search

N_GENOMES = 1000
BUDGET = 200


def test_criterion_01_rank_metrics(report_criterion):
    checks = [
        metrics.spearman([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0,
        metrics.spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0,
        abs(metrics.kendall([1, 2, 3], [1, 2, 3]) - 1.0) <= 1e-12,
        abs(metrics.kendall([1, 2, 3], [3, 2, 1]) + 1.0) <= 1e-12,
        abs(metrics.pearson([1, 2, 3], [1, 2, 3]) - 1.0) <= 1e-12,
        abs(metrics.pearson([1, 2, 3], [3, 2, 1]) + 1.0) <= 1e-12,
        abs(metrics.kendall([1, 2, 3], [2, 1, 3]) - 1 / 3) <= 1e-12,
        metrics.spearman_at_topk([4, 3, 2, 1], [4, 3, 2, 1], 1.0) == 1.0,
        metrics.spearman_at_topk([4, 3, 2, 1], [1, 2, 3, 4], 1.0) == -1.0,
        abs(metrics.spearman_at_topk([4, 3, 2, 1], [3, 4, 2, 1], 0.5) + 1.0) <= 1e-12,
    ]
    rng = np.random.default_rng(0)
    same = all(metrics.spearman_at_topk(g, e, 1.0) == metrics.spearman(g, e)
               for g, e in (rng.integers(0, 5, (2, 30)) for _ in range(200)))
    ok = all(checks) and same
    report_criterion(1, ok, f"hand examples {sum(checks)}/{len(checks)}, topk(1.0)==spearman: {same}")
    assert ok


def test_criterion_02_emq_representability(report_criterion):
    from conftest import fake_stats
    rng = np.random.default_rng(2)
    g = dsl.emq_genome()
    worst = 0.0
    for _ in range(25):
        for st in fake_stats(rng):  # 4 layers each, 100 fixtures total
            want = np.mean(np.log(np.abs(st.V)) * np.sqrt(np.sum(np.abs(st.W)) / (st.W.size + 1e-9)))
            worst = max(worst, abs(dsl.evaluate_layer(g, st) - want) / abs(want))
    ok = worst <= 1e-9
    report_criterion(2, ok, f"max relative error {worst:.2e} over 100 fixtures (tol 1e-9)")
    assert ok


def validity_rate(structure, osp, stats, seed=0):
    rng = np.random.default_rng(seed)
    probes = dsl.probe_configs(len(stats))
    return np.mean([dsl.is_valid(dsl.sample_genome(structure, rng, osp), stats, probes)
                    for _ in range(N_GENOMES)])


def test_criterion_03_validity_ordering(desk_stats, report_criterion):
    with np.errstate(all="ignore"):
        rates = {(s, osp): validity_rate(s, osp, desk_stats) for s in dsl.STRUCTURES for osp in (False, True)}
    plain = [rates[s, False] for s in dsl.STRUCTURES]
    order = plain[0] > plain[1] > plain[2]
    osp_up = all(rates[s, True] > rates[s, False] for s in dsl.STRUCTURES)
    ok = order and osp_up
    detail = ", ".join(f"{s} {rates[s, False]:.3f}->{rates[s, True]:.3f}" for s in dsl.STRUCTURES)
    report_criterion(3, ok, f"validity without->with OSP: {detail}; seq>branched>dag: {order}, OSP raises all: {osp_up}")
    assert ok


def test_criterion_04_csp_efficiency(desk_bench, desk_stats, report_criterion):
    frac = {}
    with np.errstate(all="ignore"):
        for screening in (True, False):
            cfg = search.SearchConfig(seed=0, iterations=100_000, max_candidates=N_GENOMES, screening=screening)
            ev = search.evolve(cfg, desk_bench, desk_stats).evaluator
            frac[screening] = ev.evaluated / ev.sampled
    ok = frac[True] <= 0.10 and frac[False] >= 0.90
    report_criterion(4, ok, f"evaluated/sampled with screening {frac[True]:.3f} (need <= 0.10), "
                            f"without {frac[False]:.3f} (need >= 0.90)")
    assert ok


EVOLVE_RUNS = []


def test_criterion_05_search_effectiveness(desk, desk_bench, desk_stats, report_criterion):
    evo, rnd = [], []
    with np.errstate(all="ignore"):
        for seed in range(3):
            cfg = search.SearchConfig(seed=seed, iterations=100_000, max_evaluations=BUDGET)
            res = search.evolve(cfg, desk_bench, desk_stats)
            EVOLVE_RUNS.append(res)
            evo.append(search.holdout_fitness(res.best.genome, desk_bench, desk_stats))
            r = search.random_search(BUDGET, desk_bench, desk_stats, seed=seed)
            rnd.append(search.holdout_fitness(r.best.genome, desk_bench, desk_stats))
    _, test_idx = desk_bench.split()
    gt = desk_bench.accuracies(test_idx)
    cfgs = desk_bench.configs(test_idx)
    run_best = max(EVOLVE_RUNS, key=lambda res: res.best.fitness).best.genome
    rho_best = metrics.spearman(gt, dsl.config_scores(dsl.layer_scores(run_best, desk_stats), cfgs))
    rho_bparams = metrics.spearman(gt, dsl.config_scores(baselines.layer_scores("bparams", desk_stats), cfgs))
    beats_random = np.mean(evo) >= np.mean(rnd)
    beats_bparams = rho_best > rho_bparams
    ok = beats_random and beats_bparams
    report_criterion(5, ok, f"test fitness evolve {np.mean(evo):.3f} vs random {np.mean(rnd):.3f}; "
                            f"run-best rho_s@100 {rho_best:.3f} vs bparams {rho_bparams:.3f}")
    assert ok


def test_criterion_06_estimator_oracles(report_criterion):
    a = np.array([1.0, 2.0, 3.0])
    errs_tr, errs_eig = [], []
    for k, scale in enumerate((0.01, 1.0, 100.0)):
        q = np.linalg.qr(np.random.default_rng(k).standard_normal((3, 3)))[0]
        for h in (np.diag(2 * a * scale), q @ np.diag(2 * a * scale) @ q.T):
            hvp = lambda v, h=h: h @ v
            tr = hessian.hutchinson_trace(hvp, (3,), 64, np.random.default_rng(10 + k))
            errs_tr.append(abs(tr - np.trace(h)) / np.trace(h))
            eig, _ = hessian.power_iteration(hvp, (3,), np.random.default_rng(20 + k))
            top = 6.0 * scale
            errs_eig.append(abs(eig - top) / top)
    ok = max(errs_tr) <= 0.05 and max(errs_eig) <= 1e-3
    report_criterion(6, ok, f"max trace error {max(errs_tr):.4f} (tol 0.05), max eigenvalue error "
                            f"{max(errs_eig):.2e} (tol 1e-3)")
    assert ok


def test_criterion_07_quantizer_contract(report_criterion):
    rng = np.random.default_rng(7)
    worst = -np.inf
    for i in range(10_000):
        x = rng.standard_normal(int(rng.integers(2, 32))) * 10 ** rng.uniform(-3, 3)
        bits = (2, 3, 4, 8)[i % 4]
        s = quant.calibrate(x, bits)
        lo, hi = s.zero_point, s.zero_point + s.scale * s.levels
        inside = (x >= lo) & (x <= hi)
        err = np.abs(s.apply(x) - x)[inside]
        if err.size:
            worst = max(worst, float(np.max(err - s.scale / 2)))
    x = rng.standard_normal(1000)
    identity = np.array_equal(quant.quantize_dequantize(x, quant.calibrate(x, 32)), x)
    ok = worst <= 1e-12 and identity
    report_criterion(7, ok, f"max(error - scale/2) {worst:.2e} within clip range (tol 1e-12); 32-bit identity: {identity}")
    assert ok


@pytest.fixture(scope="module")
def mlp_full_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc") / "mlp.json"
    assert cli.main(["bench", "build", "--net", "mlp-s", "--configs", "81", "--out", str(out), "--seed", "0"]) == 0
    return out


def test_criterion_08_allocation_oracle(mlp_full_bench, tmp_path, report_criterion):
    emq = tmp_path / "emq.json"
    emq.write_text(dsl.dumps(dsl.emq_genome()))
    b = cli.load_bench(mlp_full_bench)
    setup, stats, ctx = cli.context(b)
    numels = setup.net.numels()
    all_cfgs = list(itertools.product((2, 3, 4), repeat=len(numels)))
    mismatches, checked = [], 0
    for proxy in (*baselines.BASELINES, str(emq)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scores = baselines.layer_scores(proxy, stats, ctx) if proxy in baselines.BASELINES \
                else dsl.layer_scores(dsl.emq_genome(), stats)
        for budget in (0.0012, 0.0015, 0.0020):
            out = tmp_path / f"{cli.proxy_label(proxy)}_{budget}"
            assert cli.main(["assign", "--bench", str(mlp_full_bench), "--proxy", proxy, "--budget-mb", str(budget),
                             "--samples", "5000", "--out-dir", str(out)]) == 0
            got = tuple(json.loads((out / "assign.json").read_text())["bit_cfg"])
            fits = [c for c in all_cfgs if sum(n * bb for n, bb in zip(numels, c)) / 8e6 <= budget]
            best = max(sum(bb * s for bb, s in zip(c, scores)) for c in fits)
            got_score = sum(bb * s for bb, s in zip(got, scores))
            checked += 1
            if got not in fits or not np.isclose(got_score, best, rtol=1e-12, atol=0):
                mismatches.append((cli.proxy_label(proxy), budget))
    ok = not mismatches
    report_criterion(8, ok, f"{checked - len(mismatches)}/{checked} proxy x budget assignments match "
                            f"the 81-config brute force{'' if ok else f'; mismatches {mismatches}'}")
    assert ok


def _outputs(d, skip=("manifest.json", "timing.csv")):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name not in skip}


def test_criterion_09_determinism(tmp_path, report_criterion):
    same = {}
    benches = []
    for run in range(2):
        out = tmp_path / f"b{run}.json"
        assert cli.main(["bench", "build", "--net", "cnn-s", "--configs", "425", "--seed", "0",
                         "--out", str(out)]) == 0
        benches.append(out)
    same["bench build"] = benches[0].read_bytes() == benches[1].read_bytes()
    for name, args in (("evolve", ["evolve", "--iterations", "200", "--seed", "0"]),
                       ("eval", ["eval", "--proxy", "bparams", "--proxy", "snip", "--seed", "0"])):
        outs = []
        for run in range(2):
            d = tmp_path / f"{name}{run}"
            assert cli.main([*args, "--bench", str(benches[0]), "--out-dir", str(d)]) == 0
            outs.append(_outputs(d))
        same[name] = outs[0] == outs[1] and len(outs[0]) > 0
    ok = all(same.values())
    report_criterion(9, ok, "byte-identical reruns: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok


def test_criterion_10_elitism(desk_bench, desk_stats, report_criterion):
    runs = list(EVOLVE_RUNS)
    if not runs:
        with np.errstate(all="ignore"):
            runs = [search.evolve(search.SearchConfig(seed=s, max_evaluations=BUDGET), desk_bench, desk_stats)
                    for s in range(3)]
    bad = 0
    for res in runs:
        best = [row["best_fitness"] for row in res.history]
        sizes = {row["population_size"] for row in res.history}
        if any(b2 < b1 for b1, b2 in zip(best, best[1:])) or sizes != {20}:
            bad += 1
    ok = bad == 0
    report_criterion(10, ok, f"{len(runs) - bad}/{len(runs)} logged runs with non-decreasing best fitness "
                             f"and constant population 20")
    assert ok
