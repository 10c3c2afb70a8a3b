"""Acceptance suite: one test per criterion, printed as a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines; every tolerance is asserted exactly as stated.
"""

import math
import os
import random
import time

import numpy as np
import pytest

from morphnas import gp, search
from morphnas.evaluators import SyntheticEvaluator, synthetic_cost
from morphnas.graph import SkipDescriptor, default_cnn
from morphnas.kernel import (
    ArchSummary,
    DistanceState,
    extend,
    kernel_matrix,
    layers_edit_distance,
    op_counts,
    reset_op_counts,
    skips_edit_distance,
    summary_distance,
)
from morphnas.morph import Deep, apply_sequence, morph_weights, sample_children
from morphnas.refexec import forward, random_weights
from morphnas.search import SearchConfig, load_state, new_search, optimize_acquisition, run

from conftest import graph_pool, random_morphed_graph
from oracles import dl_brute_force, ds_brute_force, gp_naive_posterior

SMALL = dict(input_shape=(8, 8, 3), num_classes=5)
WIDTHS = [1, 2, 8, 16, 32, 64, 100, 128, 256, 512]


@pytest.fixture
def report(capfd):
    """Per-criterion pass line, emitted outside pytest's capture."""

    def _report(name: str) -> None:
        with capfd.disabled():
            print(f"\n[ACCEPTANCE] {name}: PASS", flush=True)

    return _report


# -- 1. metric axioms -----------------------------------------------------------


def test_metric_axioms(report):
    start = time.monotonic()
    rng = random.Random(1001)
    pool = graph_pool(1001, 150, max_ops=8)
    summaries = [ArchSummary.of(g) for g in pool]
    cache: dict[tuple[int, int], float] = {}

    def d(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            cache[key] = summary_distance(summaries[key[0]], summaries[key[1]])
        return cache[key]

    n = len(pool)
    for _ in range(1000):
        i, j = rng.randrange(n), rng.randrange(n)
        dij = summary_distance(summaries[i], summaries[j])
        dji = summary_distance(summaries[j], summaries[i])
        assert dij >= 0.0
        assert dij == dji  # symmetry, exact
        assert (dij == 0.0) == (summaries[i] == summaries[j])  # definiteness
    for _ in range(500):
        i, j, k = rng.randrange(n), rng.randrange(n), rng.randrange(n)
        assert d(i, j) <= d(i, k) + d(k, j) + 1e-9  # triangle
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"metric axioms took {elapsed:.1f}s"
    report("metric axioms (1000 pairs, 500 triples, triangle 1e-9)")


# -- 2. matching oracles ----------------------------------------------------------


def test_matching_oracles(report):
    start = time.monotonic()
    rng = random.Random(1002)
    for _ in range(200):
        wa = [rng.choice(WIDTHS) for _ in range(rng.randrange(0, 7))]
        wb = [rng.choice(WIDTHS) for _ in range(rng.randrange(0, 7))]
        assert abs(layers_edit_distance(wa, wb) - dl_brute_force(wa, wb)) <= 1e-12
    for _ in range(200):
        sa = tuple(
            SkipDescriptor(rng.randrange(0, 9), rng.randrange(1, 9), rng.choice(["add", "concat"]))
            for _ in range(rng.randrange(0, 6))
        )
        sb = tuple(
            SkipDescriptor(rng.randrange(0, 9), rng.randrange(1, 9), rng.choice(["add", "concat"]))
            for _ in range(rng.randrange(0, 6))
        )
        assert abs(skips_edit_distance(sa, sb) - ds_brute_force(sa, sb)) <= 1e-12
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"matching oracles took {elapsed:.1f}s"
    report("matching oracles (200 D_l + 200 D_s instances, exact to 1e-12)")


# -- 3. kernel validity --------------------------------------------------------------


def test_kernel_validity(report):
    worst = 0.0
    for trial in range(50):
        state = DistanceState(lam=1.0, rng_seed=trial)
        rng = random.Random(2000 + trial)
        K = None
        for _ in range(30):
            g = random_morphed_graph(rng, max_ops=4)
            state, K = extend(state, g)
        min_eig = float(np.linalg.eigvalsh(K).min())
        worst = min(worst, min_eig)
        assert min_eig >= -1e-8
    report(f"kernel validity (50 histories of 30, min eigenvalue {worst:.2e} >= -1e-8)")


# -- 4. GP correctness ---------------------------------------------------------------


def test_gp_correctness(report):
    rng = np.random.default_rng(1004)
    for _ in range(50):
        n = int(rng.integers(1, 13))
        X = rng.normal(0, 1, (n, 4))
        d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
        K = np.exp(-d2)
        y = rng.uniform(0, 1, n)
        model = gp.fit(K, y)
        q = rng.normal(0, 1, 4)
        k_star = np.exp(-((X - q) ** 2).sum(-1))
        mu, sigma = gp.predict(model, k_star)
        mu_o, sigma_o = gp_naive_posterior(K, y, k_star, 1.0, model.noise)
        assert abs(mu - mu_o) <= 1e-8
        assert abs(sigma - sigma_o) <= 1e-8
    report("GP posterior matches dense-inversion oracle (50 problems, 1e-8)")


# -- 5. morphism function preservation --------------------------------------------------


def _preserving_op(g, rng):
    for _ in range(10):
        kids = sample_children(g, rng, 8)
        ops = [op for op, _ in kids if not (isinstance(op, Deep) and op.kind == "relu")]
        if ops:
            return ops[rng.randrange(len(ops))]
    return None


def test_function_preservation(report):
    rng = random.Random(1005)
    nprng = np.random.default_rng(1005)
    worst_zero = 0.0
    worst_noise = 0.0
    done = 0
    while done < 200:
        g = random_morphed_graph(rng, max_ops=3)
        op = _preserving_op(g, rng)
        if op is None:
            continue
        w = random_weights(g, nprng)
        shape = g.nodes[g.input_node]
        xs = [nprng.normal(0, 1, (shape.height, shape.width, shape.channels)) for _ in range(2)]
        base = [forward(g, w, x) for x in xs]
        g0, w0 = morph_weights(g, w, op, noise_scale=0.0)
        gn, wn = morph_weights(g, w, op, noise_scale=1e-5, rng=nprng)
        for x, y in zip(xs, base):
            worst_zero = max(worst_zero, float(np.abs(forward(g0, w0, x) - y).max()))
            worst_noise = max(worst_noise, float(np.abs(forward(gn, wn, x) - y).max()))
        done += 1
    assert worst_zero <= 1e-5, f"zero-noise deviation {worst_zero:.2e}"
    assert worst_noise <= 1e-3, f"default-noise deviation {worst_noise:.2e}"
    report(
        f"morphism function preservation (200 triples; zero-noise {worst_zero:.1e} <= 1e-5, "
        f"noise 1e-5 -> {worst_noise:.1e} <= 1e-3)"
    )


# -- 6. search effectiveness -------------------------------------------------------------


BUDGET = 40


def _bo_best(seed: int, out_dir: str | None = None) -> float:
    ev = SyntheticEvaluator()
    cfg = SearchConfig(rng_seed=seed, eval_budget=BUDGET - 1, output_dir=out_dir, **SMALL)
    state = run(new_search(cfg, ev), ev, pipeline=True)
    assert len(state.history) == BUDGET
    return min(rec.cost for rec in state.history)

def _random_best(seed: int) -> float:
    rng = random.Random(seed)
    g0 = default_cnn(SMALL["input_shape"], SMALL["num_classes"])
    pool = [g0]
    best = synthetic_cost(g0, seed)
    evals = 1
    while evals < BUDGET:
        parent = pool[rng.randrange(len(pool))]
        kids = sample_children(parent, rng, 1)
        if not kids:
            continue
        child = kids[0][1]
        pool.append(child)
        best = min(best, synthetic_cost(child, seed))
        evals += 1
    return best


def _bfs_best(seed: int) -> float:
    rng = random.Random(seed)
    g0 = default_cnn(SMALL["input_shape"], SMALL["num_classes"])
    best = synthetic_cost(g0, seed)
    queue = [g0]
    evals = 1
    while evals < BUDGET and queue:
        g = queue.pop(0)
        for _, child in sample_children(g, rng, 8):
            if evals >= BUDGET:
                break
            best = min(best, synthetic_cost(child, seed))
            queue.append(child)
            evals += 1
    return best


@pytest.fixture(scope="module")
def bo_benchmark(tmp_path_factory):
    """Ten seeds of the full method vs the two baselines; seed 0 persisted."""
    start = time.monotonic()
    run_dir = str(tmp_path_factory.mktemp("bo") / "run0")
    rows = []
    for seed in range(10):
        bo = _bo_best(seed, out_dir=run_dir if seed == 0 else None)
        rows.append((seed, bo, _random_best(seed), _bfs_best(seed)))
    return {"rows": rows, "run_dir": run_dir, "elapsed": time.monotonic() - start}


def test_search_effectiveness(bo_benchmark, report):
    rows = bo_benchmark["rows"]
    wins = sum(1 for _, bo, rnd, bfs in rows if bo <= rnd and bo <= bfs)
    hits = sum(1 for _, bo, _, _ in rows if bo <= 0.15)
    for seed, bo, rnd, bfs in rows:
        print(f"  seed {seed}: BO {bo:.4f}  random {rnd:.4f}  BFS {bfs:.4f}")
    assert wins >= 8, f"BO beat both baselines in only {wins}/10 seeds"
    assert hits >= 7, f"BO reached <= 0.15 in only {hits}/10 seeds"
    assert bo_benchmark["elapsed"] < 300.0, f"effectiveness took {bo_benchmark['elapsed']:.0f}s"
    report(
        f"search effectiveness (beats random+BFS {wins}/10, cost<=0.15 in {hits}/10, "
        f"{bo_benchmark['elapsed']:.0f}s < 5min)"
    )


# -- 7. acquisition-optimizer contract ------------------------------------------------------


def test_acquisition_optimizer_contract(report):
    ev = SyntheticEvaluator()
    cfg = SearchConfig(rng_seed=77, eval_budget=6, **SMALL)
    state = run(new_search(cfg, ev), ev, pipeline=False)
    model = search._fit_model(state)
    bound = 4 * state.init_mem_estimate
    results = []
    for _ in range(2):
        opt = optimize_acquisition(
            state.history,
            model,
            state.dist_state,
            state.config,
            random.Random(5),
            memory_bound=bound,
        )
        child = apply_sequence(opt.parent.graph, opt.ops)
        assert child.validate() is None
        assert child.estimate_memory(search.MEMORY_ESTIMATE_BATCH) <= bound
        assert opt.iterations <= math.ceil(math.log(cfg.t_low) / math.log(cfg.r))
        results.append((opt.parent.arch_id, tuple(opt.ops)))
    assert results[0] == results[1]  # fixed seed -> identical output
    report("acquisition optimizer contract (replayable, bounded, deterministic)")


# -- 8. kernel-quality diagnostic ---------------------------------------------------------


def test_kernel_quality_diagnostic(bo_benchmark, capfd, report):
    from morphnas.cli import main

    run_dir = bo_benchmark["run_dir"]
    assert main(["kernel", run_dir]) == 0
    out = capfd.readouterr().out
    mse = float(out.split("MSE = ")[1].split()[0])
    assert np.isfinite(mse)
    K = np.loadtxt(os.path.join(run_dir, "K.csv"), delimiter=",")
    P = np.loadtxt(os.path.join(run_dir, "P.csv"), delimiter=",")
    assert K.shape == (BUDGET, BUDGET) and P.shape == (BUDGET, BUDGET)
    for m in (K, P):
        assert np.all(np.diagonal(m) == 1.0)
        assert m.min() >= -1.0 - 1e-12 and m.max() <= 1.0 + 1e-12
    report(f"kernel-quality diagnostic (K, P in [-1,1], unit diagonals, MSE {mse:.4f})")


# -- 9. resume fidelity --------------------------------------------------------------------


def test_resume_fidelity(tmp_path, report):
    def history_of(path):
        with open(os.path.join(path, "history.jsonl")) as fh:
            return fh.read()

    ev = SyntheticEvaluator()
    full_dir = str(tmp_path / "full")
    cfg = SearchConfig(rng_seed=21, eval_budget=20, output_dir=full_dir, **SMALL)
    run(new_search(cfg, ev), ev, pipeline=True)

    part_dir = str(tmp_path / "part")
    cfg2 = SearchConfig(rng_seed=21, eval_budget=8, output_dir=part_dir, **SMALL)
    run(new_search(cfg2, ev), ev, pipeline=True)  # interrupt after 8 evaluations
    resumed = load_state(part_dir)
    resumed.config.eval_budget = 20
    run(resumed, ev, pipeline=True)

    assert history_of(part_dir) == history_of(full_dir)
    report("resume fidelity (interrupt at 8/20, histories byte-identical)")


# -- 10. complexity scaling ---------------------------------------------------------------


def test_complexity_scaling(report):
    rng = random.Random(1010)
    sizes = (4, 8, 16, 32)
    dl_counts, ds_counts = [], []
    for size in sizes:
        reset_op_counts()
        for _ in range(10):
            wa = [rng.choice(WIDTHS) for _ in range(size)]
            wb = [rng.choice(WIDTHS) for _ in range(size)]
            layers_edit_distance(wa, wb)
        dl_counts.append(op_counts["dl_cells"])
        reset_op_counts()
        for _ in range(10):
            # augmentation-cascade instances exercise the cubic bound
            sa = tuple(SkipDescriptor(1, 1, "add") for _ in range(size))
            sb = tuple(SkipDescriptor(j + 1, j + 1, "add") for j in range(size))
            skips_edit_distance(sa, sb)
        ds_counts.append(op_counts["ds_steps"])
    span = math.log2(sizes[-1] / sizes[0])
    dl_slope = math.log2(dl_counts[-1] / dl_counts[0]) / span
    ds_slope = math.log2(ds_counts[-1] / ds_counts[0]) / span
    assert abs(dl_slope - 2.0) <= 0.4, f"D_l slope {dl_slope:.2f}"
    assert abs(ds_slope - 3.0) <= 0.4, f"D_s slope {ds_slope:.2f}"
    report(f"complexity scaling (D_l slope {dl_slope:.2f}~2, D_s slope {ds_slope:.2f}~3)")
