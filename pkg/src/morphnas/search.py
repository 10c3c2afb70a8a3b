"""The Bayesian-optimization search loop.

One cycle fits a Gaussian process on the history (update), picks the next
morph via simulated-annealing tree search over the acquisition function
(generation), and evaluates the morphed architecture (observation).  The
run loop can pipeline generation with evaluation: while the evaluator works
on candidate k, the next candidate is generated against the history through
k-1, which is exactly what makes an interrupted run resumable bit-for-bit.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from morphnas import gp
from morphnas.evaluators import EvalRequest, EvalResult, DEFAULT_MAX_EPOCHS, DEFAULT_TAU
from morphnas.graph import ArchGraph, default_cnn
from morphnas.kernel import (
    ArchSummary,
    DistanceState,
    bourgain_subsets,
    extend,
    kernel_matrix,
    layers_edit_distance,
    skips_edit_distance,
    summary_distance,
)
from morphnas.morph import MorphOp, apply_sequence, op_from_json, op_to_json, sample_children

__all__ = [
    "SearchConfig",
    "HistoryRecord",
    "PendingCandidate",
    "SearchState",
    "OptResult",
    "SearchError",
    "NoCandidatesError",
    "SearchLoadError",
    "ucb",
    "CandidateScorer",
    "optimize_acquisition",
    "new_search",
    "search_step",
    "run",
    "adapt_memory_bound",
    "save_state",
    "load_state",
    "MEMORY_ESTIMATE_BATCH",
]

# batch size assumed when comparing architecture footprints to the memory bound
MEMORY_ESTIMATE_BATCH = 64


class SearchError(RuntimeError):
    pass


class NoCandidatesError(SearchError):
    """No expandable architecture within the memory bound."""


class SearchLoadError(SearchError):
    """A persisted search directory is missing or corrupt."""


@dataclass
class SearchConfig:
    beta: float = 2.5
    lam: float = 1.0
    t_low: float = 1e-3
    r: float = 0.9
    max_children: int = 8
    memory_bound: int | None = None
    time_budget: float | None = None
    eval_budget: int | None = None
    rng_seed: int = 0
    output_dir: str | None = None
    # problem definition and evaluation settings carried by the config file
    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 10
    max_epochs: int = DEFAULT_MAX_EPOCHS
    tau: int = DEFAULT_TAU
    evaluator: object = "oracle"  # "oracle" | {"command": [...]}

    def __post_init__(self):
        if not (0.0 < self.r < 1.0):
            raise ValueError("r must be in (0, 1)")
        if self.t_low <= 0.0:
            raise ValueError("t_low must be positive")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.max_children < 1:
            raise ValueError("max_children must be >= 1")
        if self.lam <= 0.0:
            raise ValueError("lambda must be positive")
        self.input_shape = tuple(self.input_shape)

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["input_shape"] = list(self.input_shape)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SearchConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config field: {sorted(unknown)[0]}")
        return cls(**doc)


@dataclass
class HistoryRecord:
    arch_id: int
    graph: ArchGraph
    cost: float
    epoch_trace: list[tuple[int, float]]
    parent_id: int | None = None
    ops_from_parent: list[MorphOp] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "graph": json.loads(self.graph.to_json(indent=None)),
            "cost": self.cost,
            "epoch_trace": [[e, v] for e, v in self.epoch_trace],
            "parent_id": self.parent_id,
            "ops_from_parent": [op_to_json(op) for op in self.ops_from_parent],
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "HistoryRecord":
        graph = ArchGraph.from_dict(doc["graph"])
        graph.require_valid()
        return cls(
            arch_id=doc["arch_id"],
            graph=graph,
            cost=doc["cost"],
            epoch_trace=[(e, v) for e, v in doc["epoch_trace"]],
            parent_id=doc["parent_id"],
            ops_from_parent=[op_from_json(o) for o in doc["ops_from_parent"]],
            wall_time=doc["wall_time"],
        )


@dataclass
class PendingCandidate:
    arch_id: int
    graph: ArchGraph
    parent_id: int | None
    ops: list[MorphOp]
    alpha: float | None

    def to_json_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "graph": json.loads(self.graph.to_json(indent=None)),
            "parent_id": self.parent_id,
            "ops": [op_to_json(op) for op in self.ops],
            "alpha": self.alpha,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PendingCandidate":
        graph = ArchGraph.from_dict(doc["graph"])
        graph.require_valid()
        return cls(
            arch_id=doc["arch_id"],
            graph=graph,
            parent_id=doc["parent_id"],
            ops=[op_from_json(o) for o in doc["ops"]],
            alpha=doc["alpha"],
        )


@dataclass
class SearchState:
    config: SearchConfig
    history: list[HistoryRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    dist_state: DistanceState | None = None
    rng: random.Random = field(default_factory=random.Random)
    next_arch_id: int = 0
    evals_done: int = 0
    memory_bound: int | None = None
    init_mem_estimate: int = 0
    pending: PendingCandidate | None = None
    elapsed_s: float = 0.0

    def best_record(self) -> HistoryRecord:
        return min(self.history, key=lambda rec: (rec.cost, rec.arch_id))


@dataclass
class OptResult:
    parent: HistoryRecord
    ops: list[MorphOp]
    alpha: float | None
    iterations: int
    candidates_scored: int


def ucb(mu: float, sigma: float, beta: float) -> float:
    """Lower-confidence bound on cost: lower is better."""
    return mu - beta * sigma


_DS_CACHE: dict[tuple, float] = {}


def _ds_cached(sa: tuple, sb: tuple) -> float:
    """Skip-set distance memoized across steps; skip sets recur heavily."""
    key = (sa, sb)
    value = _DS_CACHE.get(key)
    if value is None:
        value = skips_edit_distance(sa, sb)
        if len(_DS_CACHE) > 500_000:
            _DS_CACHE.clear()
        _DS_CACHE[key] = value
    return value


class CandidateScorer:
    """Acquisition values for candidate architectures against one GP fit.

    A candidate is embedded by temporarily extending the distance matrix with
    it and re-running the Bourgain construction for n+1 points; the anchor
    subsets depend only on (n+1, seed), so they are drawn once per step and
    shared across candidates.
    """

    def __init__(self, dist_state: DistanceState, model: gp.GpModel, beta: float):
        self.dist_state = dist_state
        self.model = model
        self.beta = beta
        self.lam = dist_state.lam
        n = len(dist_state)
        self.n = n
        self._alpha_cache: dict[ArchSummary, float] = {}
        self._ds_cache: dict[tuple, np.ndarray] = {}
        trunks = [s.trunk_widths for s in dist_state.summaries]
        self._lens = np.array([len(t) for t in trunks])
        lmax = max(1, int(self._lens.max(initial=1)))
        self._trunks = np.ones((n, lmax))
        for i, t in enumerate(trunks):
            self._trunks[i, : len(t)] = t
        if n + 1 > 2:
            self._subsets = bourgain_subsets(n + 1, dist_state.rng_seed)
            k = len(self._subsets)
            self._base = np.empty((n, k))
            self._anchors_hist: list[np.ndarray] = []
            self._has_new = np.zeros(k, dtype=bool)
            for idx, anchor in enumerate(self._subsets):
                hist_part = anchor[anchor < n]
                self._anchors_hist.append(hist_part)
                self._has_new[idx] = bool((anchor == n).any())
                if hist_part.size:
                    self._base[:, idx] = dist_state.dist[:, hist_part].min(axis=1)
                else:
                    self._base[:, idx] = np.inf
            self._k = k

    def _trunk_distances(self, widths: tuple[int, ...]) -> np.ndarray:
        """D_l from the candidate trunk to every history trunk, batched."""
        n, lmax = self._trunks.shape
        if not widths:
            return self._lens.astype(float)
        cols = np.arange(lmax + 1, dtype=float)
        prev = np.broadcast_to(cols, (n, lmax + 1)).copy()
        for i, wa in enumerate(widths, start=1):
            d = np.abs(wa - self._trunks) / np.maximum(wa, self._trunks)
            t = np.minimum(prev[:, 1:] + 1.0, prev[:, :-1] + d)
            z = np.concatenate([np.full((n, 1), float(i)), t - cols[1:]], axis=1)
            prev = np.minimum.accumulate(z, axis=1) + cols
        return prev[np.arange(n), self._lens]

    def _skip_distances(self, skips: tuple) -> np.ndarray:
        cached = self._ds_cache.get(skips)
        if cached is None:
            cached = np.array(
                [_ds_cached(skips, s.skips) for s in self.dist_state.summaries]
            )
            self._ds_cache[skips] = cached
        return cached

    def distance_row(self, summary: ArchSummary) -> np.ndarray:
        return self._trunk_distances(summary.trunk_widths) + self.lam * self._skip_distances(
            summary.skips
        )

    def k_star(self, summary: ArchSummary) -> np.ndarray:
        """Cross-kernel vector between the candidate and the history."""
        d_new = self.distance_row(summary)
        n = self.n
        if n + 1 == 2:
            return np.exp(-np.square(d_new))
        coords = self._base.copy()
        if self._has_new.any():
            coords[:, self._has_new] = np.minimum(coords[:, self._has_new], d_new[:, None])
        cand = np.empty(self._k)
        for idx, hist_part in enumerate(self._anchors_hist):
            if self._has_new[idx]:
                cand[idx] = 0.0  # the subset contains the candidate itself
            else:
                cand[idx] = d_new[hist_part].min()
        scale = math.sqrt(self._k)
        diff = (coords - cand[None, :]) / scale
        return np.exp(-np.sum(diff * diff, axis=1))

    def alpha(self, graph: ArchGraph) -> float:
        summary = ArchSummary.of(graph)
        cached = self._alpha_cache.get(summary)
        if cached is not None:
            return cached
        mu, sigma = gp.predict(self.model, self.k_star(summary))
        value = ucb(mu, sigma, self.beta)
        self._alpha_cache[summary] = value
        return value


def optimize_acquisition(
    history: list[HistoryRecord],
    model: gp.GpModel,
    dist_state: DistanceState,
    config: SearchConfig,
    rng: random.Random,
    memory_bound: int | None = None,
    accept_all: bool = False,
) -> OptResult:
    """Simulated-annealing tree search for the next morph.

    Seeds a priority queue with the whole history (scored by observed cost),
    then repeatedly expands the best entry, pushing sampled children scored
    by the acquisition value when annealing accepts them.  Returns the best
    candidate's nearest history ancestor and the op sequence to reach it.
    """
    if not history:
        raise SearchError("history is empty")
    scorer = CandidateScorer(dist_state, model, config.beta)
    heap: list[tuple[float, int, int, tuple[MorphOp, ...]]] = []
    graphs: dict[int, ArchGraph] = {}
    seq = 0
    for idx, rec in enumerate(sorted(history, key=lambda rec: rec.arch_id)):
        heap.append((rec.cost, seq, idx, ()))
        graphs[seq] = rec.graph
        seq += 1
    by_rank = sorted(history, key=lambda rec: rec.arch_id)
    heapq.heapify(heap)
    c_min = min(rec.cost for rec in history)
    best = min(range(len(by_rank)), key=lambda i: (by_rank[i].cost, by_rank[i].arch_id))
    f_min: tuple[int, tuple[MorphOp, ...], float | None] = (best, (), None)
    temperature = 1.0
    iterations = 0
    scored = 0
    while heap and temperature > config.t_low:
        temperature *= config.r
        iterations += 1
        _, entry_seq, anc, ops = heapq.heappop(heap)
        g = graphs.pop(entry_seq)
        for op, child in sample_children(g, rng, config.max_children):
            if (
                memory_bound is not None
                and child.estimate_memory(MEMORY_ESTIMATE_BATCH) > memory_bound
            ):
                continue
            a = scorer.alpha(child)
            scored += 1
            arg = (c_min - a) / temperature
            u = rng.random()
            if accept_all or arg >= 0.0 or math.exp(arg) > u:
                heapq.heappush(heap, (a, seq, anc, ops + (op,)))
                graphs[seq] = child
                seq += 1
            if a < c_min:
                c_min = a
                f_min = (anc, ops + (op,), a)
    if iterations > 0 and scored == 0:
        raise NoCandidatesError("no expandable architecture within the memory bound")
    anc, ops, alpha = f_min
    return OptResult(
        parent=by_rank[anc],
        ops=list(ops),
        alpha=alpha,
        iterations=iterations,
        candidates_scored=scored,
    )


# -- search lifecycle -----------------------------------------------------------


def _fit_model(state: SearchState) -> gp.GpModel:
    K = kernel_matrix(state.dist_state.embed)
    y = np.array([rec.cost for rec in state.history])
    return gp.fit(K, y, train_embed=state.dist_state.embed)


def _generate(state: SearchState) -> PendingCandidate:
    model = _fit_model(state)
    opt = optimize_acquisition(
        state.history,
        model,
        state.dist_state,
        state.config,
        state.rng,
        state.memory_bound,
    )
    child = apply_sequence(opt.parent.graph, opt.ops)
    cand = PendingCandidate(
        arch_id=state.next_arch_id,
        graph=child,
        parent_id=opt.parent.arch_id,
        ops=opt.ops,
        alpha=opt.alpha,
    )
    state.next_arch_id += 1
    return cand


def _request(state: SearchState, cand: PendingCandidate) -> EvalRequest:
    cfg = state.config
    return EvalRequest(
        arch_id=cand.arch_id,
        graph=cand.graph,
        max_epochs=cfg.max_epochs,
        tau=cfg.tau,
        seed=cfg.rng_seed,
    )


def _observe(state: SearchState, cand: PendingCandidate, res: EvalResult) -> HistoryRecord | None:
    state.evals_done += 1
    if res.status == "ok":
        state.dist_state, _ = extend(state.dist_state, cand.graph)
        rec = HistoryRecord(
            arch_id=cand.arch_id,
            graph=cand.graph,
            cost=res.cost,
            epoch_trace=res.epoch_trace,
            parent_id=cand.parent_id,
            ops_from_parent=cand.ops,
            wall_time=res.wall_time,
        )
        state.history.append(rec)
        return rec
    failure = {
        "arch_id": cand.arch_id,
        "status": res.status,
        "reason": res.reason,
        "estimated_bytes": res.estimated_bytes,
    }
    state.failures.append(failure)
    if res.status == "oom":
        adapt_memory_bound(state, res.estimated_bytes)
    return None


def adapt_memory_bound(state: SearchState, estimated_bytes: int) -> None:
    """Lower the architecture-size bound after an out-of-memory event."""
    lowered = int(0.9 * estimated_bytes)
    if state.memory_bound is None:
        state.memory_bound = lowered
    else:
        state.memory_bound = min(state.memory_bound, lowered)
    if state.memory_bound < state.init_mem_estimate:
        raise SearchError(
            f"memory bound {state.memory_bound} fell below the initial "
            f"architecture's footprint {state.init_mem_estimate}"
        )


def new_search(config: SearchConfig, evaluator, initial_graph: ArchGraph | None = None) -> SearchState:
    """Create a state and evaluate the initial architecture."""
    if initial_graph is None:
        initial_graph = default_cnn(config.input_shape, config.num_classes)
    initial_graph.require_valid()
    init_estimate = initial_graph.estimate_memory(MEMORY_ESTIMATE_BATCH)
    if config.memory_bound is not None and init_estimate > config.memory_bound:
        raise SearchError(
            f"initial architecture needs {init_estimate} bytes, over the "
            f"memory bound {config.memory_bound}"
        )
    state = SearchState(
        config=config,
        dist_state=DistanceState(lam=config.lam, rng_seed=config.rng_seed),
        rng=random.Random(config.rng_seed),
        memory_bound=config.memory_bound,
        init_mem_estimate=init_estimate,
    )
    seed_cand = PendingCandidate(
        arch_id=state.next_arch_id, graph=initial_graph, parent_id=None, ops=[], alpha=None
    )
    state.next_arch_id += 1
    res = evaluator.evaluate(_request(state, seed_cand))
    rec = _observe(state, seed_cand, res)
    state.evals_done = 0  # the seed does not count against the budget
    if rec is None:
        raise SearchError(f"initial architecture failed to evaluate: {res.reason or res.status}")
    if state.config.output_dir:
        save_state(state)
    return state


def search_step(state: SearchState, evaluator) -> SearchState:
    """One sequential update -> generation -> observation cycle."""
    start = time.monotonic()
    cand = state.pending if state.pending is not None else _generate(state)
    state.pending = None
    res = evaluator.evaluate(_request(state, cand))
    _observe(state, cand, res)
    state.elapsed_s += time.monotonic() - start
    if state.config.output_dir:
        save_state(state)
    return state


def _budget_left(state: SearchState, session_start: float, session_base: float) -> bool:
    cfg = state.config
    if cfg.eval_budget is not None and state.evals_done >= cfg.eval_budget:
        return False
    if cfg.time_budget is not None:
        elapsed = session_base + (time.monotonic() - session_start)
        if elapsed >= cfg.time_budget:
            return False
    return True


def run(
    state: SearchState,
    evaluator,
    pipeline: bool = True,
    step_callback=None,
) -> SearchState:
    """Run until the evaluation or time budget is exhausted.

    With pipelining, the next candidate is generated while the current one
    evaluates, so its generation sees the history one observation behind;
    without, generation strictly follows each observation.
    """
    session_start = time.monotonic()
    session_base = state.elapsed_s
    try:
        while _budget_left(state, session_start, session_base):
            if state.pending is None:
                state.pending = _generate(state)
            cand = state.pending
            req = _request(state, cand)
            if pipeline:
                box: dict[str, object] = {}

                def _work(req=req, box=box):
                    try:
                        box["result"] = evaluator.evaluate(req)
                    except Exception as exc:  # noqa: BLE001 - surfaced below
                        box["error"] = exc

                worker = threading.Thread(target=_work, daemon=True)
                worker.start()
                try:
                    nxt = _generate(state)
                except NoCandidatesError:
                    nxt = None
                worker.join()
                if "error" in box:
                    raise SearchError(f"evaluator crashed: {box['error']}")
                res = box["result"]
            else:
                nxt = None
                res = evaluator.evaluate(req)
            rec = _observe(state, cand, res)
            state.pending = nxt
            state.elapsed_s = session_base + (time.monotonic() - session_start)
            if state.config.output_dir:
                save_state(state)
            if step_callback is not None:
                step_callback(state, cand, res, rec)
    except NoCandidatesError:
        pass
    finally:
        state.elapsed_s = session_base + (time.monotonic() - session_start)
        if state.config.output_dir:
            save_state(state)
    return state


# -- persistence -----------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_state(state: SearchState) -> None:
    out = state.config.output_dir
    if not out:
        raise SearchError("no output directory configured")
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    rng_state = state.rng.getstate()
    doc = {
        "version": 1,
        "config": state.config.to_json_dict(),
        "rng_state": [rng_state[0], list(rng_state[1]), rng_state[2]],
        "next_arch_id": state.next_arch_id,
        "evals_done": state.evals_done,
        "memory_bound": state.memory_bound,
        "init_mem_estimate": state.init_mem_estimate,
        "failures": state.failures,
        "elapsed_s": state.elapsed_s,
        "pending": state.pending.to_json_dict() if state.pending else None,
    }
    _atomic_write(os.path.join(out, "state.json"), json.dumps(doc, indent=2))
    lines = [json.dumps(rec.to_json_dict()) for rec in state.history]
    _atomic_write(os.path.join(out, "history.jsonl"), "\n".join(lines) + ("\n" if lines else ""))
    _atomic_write(os.path.join(out, "kernel-state.json"), state.dist_state.to_json())
    for rec in state.history:
        path = os.path.join(out, "models", f"arch_{rec.arch_id}.json")
        if not os.path.exists(path):
            _atomic_write(path, rec.graph.to_json())


def load_state(output_dir: str) -> SearchState:
    """Restore a persisted search; every stored graph is re-validated."""

    def _read(name: str) -> str:
        path = os.path.join(output_dir, name)
        if not os.path.exists(path):
            raise SearchLoadError(f"missing {name} in {output_dir}")
        with open(path) as fh:
            return fh.read()

    try:
        doc = json.loads(_read("state.json"))
    except json.JSONDecodeError as exc:
        raise SearchLoadError(f"corrupt state.json: {exc}") from exc
    try:
        config = SearchConfig.from_json_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SearchLoadError(f"corrupt state.json config: {exc}") from exc
    history: list[HistoryRecord] = []
    for lineno, line in enumerate(_read("history.jsonl").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            history.append(HistoryRecord.from_json_dict(json.loads(line)))
        except Exception as exc:  # noqa: BLE001 - wrapped with location
            raise SearchLoadError(f"corrupt history.jsonl line {lineno}: {exc}") from exc
    try:
        dist_state = DistanceState.from_json(_read("kernel-state.json"), lam=config.lam)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise SearchLoadError(f"corrupt kernel-state.json: {exc}") from exc
    if len(dist_state) != len(history):
        raise SearchLoadError(
            f"kernel-state.json holds {len(dist_state)} entries for {len(history)} history records"
        )
    for rec, summary in zip(history, dist_state.summaries):
        if ArchSummary.of(rec.graph) != summary:
            raise SearchLoadError(
                f"kernel-state.json summary mismatch at arch {rec.arch_id}"
            )
    rng = random.Random()
    raw = doc["rng_state"]
    rng.setstate((raw[0], tuple(raw[1]), raw[2]))
    pending = PendingCandidate.from_json_dict(doc["pending"]) if doc.get("pending") else None
    state = SearchState(
        config=config,
        history=history,
        failures=doc.get("failures", []),
        dist_state=dist_state,
        rng=rng,
        next_arch_id=doc["next_arch_id"],
        evals_done=doc["evals_done"],
        memory_bound=doc.get("memory_bound"),
        init_mem_estimate=doc.get("init_mem_estimate", 0),
        pending=pending,
        elapsed_s=doc.get("elapsed_s", 0.0),
    )
    return state
