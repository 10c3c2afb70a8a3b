"""Edit-distance between architectures and the kernel built on top of it.

The distance compares two structural summaries: the width sequence of the
main chain and the set of skip descriptors.  Layer matching is solved by an
edit-distance DP, skip matching by minimum-cost assignment.  Raw distances
form a metric; a randomized Bourgain embedding maps them into Euclidean
space so that exp(-rho^2) is a positive-semidefinite kernel.

Operation counters (``op_counts``) record DP cell updates and assignment
inner-loop steps so the quadratic/cubic growth claims are checkable without
timing anything.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from morphnas.graph import ArchGraph, SkipDescriptor

__all__ = [
    "ArchSummary",
    "DistanceState",
    "layer_distance",
    "layers_edit_distance",
    "skip_distance",
    "skips_edit_distance",
    "arch_distance",
    "summary_distance",
    "bourgain_embed",
    "bourgain_subsets",
    "kernel_value",
    "kernel_matrix",
    "extend",
    "op_counts",
    "reset_op_counts",
    "MetricError",
]

TRIANGLE_TOL = 1e-9

# test instrumentation: cell updates for the layer DP, inner-loop steps for
# the assignment solver
op_counts = {"dl_cells": 0, "ds_steps": 0}


def reset_op_counts() -> None:
    op_counts["dl_cells"] = 0
    op_counts["ds_steps"] = 0


class MetricError(ValueError):
    """Raised when a distance matrix is not a metric."""


@dataclass(frozen=True)
class ArchSummary:
    """What the distance sees of an architecture."""

    trunk_widths: tuple[int, ...]
    skips: tuple[SkipDescriptor, ...]

    @classmethod
    def of(cls, g: ArchGraph) -> "ArchSummary":
        return cls(g.main_chain_widths(), tuple(g.skip_set()))

    def to_json(self) -> dict:
        return {
            "trunk_widths": list(self.trunk_widths),
            "skips": [
                {"start_rank": s.start_rank, "span": s.span, "kind": s.kind} for s in self.skips
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArchSummary":
        return cls(
            tuple(doc["trunk_widths"]),
            tuple(SkipDescriptor(s["start_rank"], s["span"], s["kind"]) for s in doc["skips"]),
        )


def layer_distance(width_a: int, width_b: int) -> float:
    """Cost of widening one layer into another: |wa - wb| / max(wa, wb)."""
    return abs(width_a - width_b) / max(width_a, width_b)


def layers_edit_distance(widths_a: Sequence[int], widths_b: Sequence[int]) -> float:
    """Minimum cost of morphing one main chain into another (D_l).

    Order-preserving injective matching; unmatched layers cost 1 each.
    Computed by the edit-distance recurrence
    A[i, j] = min(A[i-1, j] + 1, A[i, j-1] + 1, A[i-1, j-1] + d_l(i, j))
    with boundaries A[i, 0] = i and A[0, j] = j.
    """
    la, lb = len(widths_a), len(widths_b)
    prev = list(range(lb + 1))
    cells = 0
    for i in range(1, la + 1):
        wa = widths_a[i - 1]
        cur = [float(i)]
        for j in range(1, lb + 1):
            wb = widths_b[j - 1]
            sub = prev[j - 1] + abs(wa - wb) / (wa if wa > wb else wb)
            dele = prev[j] + 1.0
            ins = cur[j - 1] + 1.0
            best = sub if sub < dele else dele
            cur.append(best if best < ins else ins)
        cells += lb
        prev = cur
    op_counts["dl_cells"] += cells if la else 0
    return float(prev[lb])


def skip_distance(sa: SkipDescriptor, sb: SkipDescriptor) -> float:
    """Cost of morphing one skip-connection into another (d_s)."""
    num = abs(sa.start_rank - sb.start_rank) + abs(sa.span - sb.span)
    den = max(sa.start_rank, sb.start_rank) + max(sa.span, sb.span)
    return num / den


def skips_edit_distance(
    skips_a: Sequence[SkipDescriptor], skips_b: Sequence[SkipDescriptor]
) -> float:
    """Minimum cost of morphing one skip set into another (D_s).

    Injective matching plus one unit per unmatched skip, solved as a
    minimum-cost assignment with the smaller side padded by unit-cost
    dummy rows.
    """
    na, nb = len(skips_a), len(skips_b)
    if na == 0 or nb == 0:
        return float(abs(nb - na))
    if tuple(skips_a) == tuple(skips_b):
        return 0.0
    if na > nb:
        skips_a, skips_b, na, nb = skips_b, skips_a, nb, na
    if na <= 2:
        # every real row takes a real column (d_s <= 1 = dummy cost), so
        # tiny instances reduce to direct enumeration
        if na == 1:
            best = min(skip_distance(skips_a[0], sb) for sb in skips_b)
            return best + (nb - 1)
        a0, a1 = skips_a
        best = math.inf
        for j1, b1 in enumerate(skips_b):
            d1 = skip_distance(a0, b1)
            for j2, b2 in enumerate(skips_b):
                if j1 == j2:
                    continue
                cand = d1 + skip_distance(a1, b2)
                if cand < best:
                    best = cand
        return best + (nb - 2)
    n = nb
    # padded square cost matrix; dummy rows cost one unit
    cost = [[1.0] * n for _ in range(n)]
    for i, sa in enumerate(skips_a):
        ua, da = sa.start_rank, sa.span
        row = cost[i]
        for j, sb in enumerate(skips_b):
            ub, db = sb.start_rank, sb.span
            num = (ua - ub if ua > ub else ub - ua) + (da - db if da > db else db - da)
            den = (ua if ua > ub else ub) + (da if da > db else db)
            row[j] = num / den
    return float(_assignment_min_cost(cost))


def _assignment_min_cost(cost: list[list[float]]) -> float:
    """O(n^3) shortest-augmenting-path assignment (Kuhn-Munkres family).

    Potentials-based formulation; every inner-loop visit increments the
    ds_steps counter.
    """
    n = len(cost)
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j (1-based, 0 = free)
    steps = 0
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        way = [0] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                steps += 1
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                steps += 1
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    op_counts["ds_steps"] += steps
    total = 0.0
    for j in range(1, n + 1):
        total += cost[match[j] - 1][j - 1]
    return total


def summary_distance(a: ArchSummary, b: ArchSummary, lam: float = 1.0) -> float:
    """d = D_l + lambda * D_s over structural summaries."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return layers_edit_distance(a.trunk_widths, b.trunk_widths) + lam * skips_edit_distance(
        a.skips, b.skips
    )


def arch_distance(fa: ArchGraph | ArchSummary, fb: ArchGraph | ArchSummary, lam: float = 1.0) -> float:
    """Edit distance between two architectures."""
    sa = ArchSummary.of(fa) if isinstance(fa, ArchGraph) else fa
    sb = ArchSummary.of(fb) if isinstance(fb, ArchGraph) else fb
    return summary_distance(sa, sb, lam)


# -- Bourgain embedding -------------------------------------------------------


def validate_metric(dist: np.ndarray, tol: float = TRIANGLE_TOL) -> None:
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise MetricError("distance matrix must be square")
    if n == 0:
        return
    if np.any(dist < -tol):
        raise MetricError("negative distances")
    if np.abs(np.diagonal(dist)).max(initial=0.0) > tol:
        raise MetricError("nonzero diagonal")
    if np.abs(dist - dist.T).max() > tol:
        raise MetricError("asymmetric distance matrix")
    for k in range(n):
        if np.any(dist > dist[:, k : k + 1] + dist[k : k + 1, :] + tol):
            raise MetricError(f"triangle inequality violated through point {k}")


def bourgain_subsets(n: int, rng_seed: int) -> list[np.ndarray]:
    """The anchor subsets used to embed n points, in draw order.

    For q = 1..ceil(log2 n) and t = 1..ceil(2 ln n), one subset of 2^q
    indices sampled with replacement.  Shared with the incremental scorer so
    a temporary one-point extension reproduces this exact sequence.
    """
    rng = np.random.default_rng(rng_seed)
    q_max = math.ceil(math.log2(n))
    t_max = math.ceil(2 * math.log(n))
    subsets = []
    for q in range(1, q_max + 1):
        for _ in range(t_max):
            subsets.append(rng.integers(0, n, size=2**q))
    return subsets


def bourgain_embed(dist: np.ndarray, rng_seed: int) -> np.ndarray:
    """Embed a finite metric into Euclidean space with bounded distortion.

    Coordinates are min-distances to random anchor subsets, scaled by
    1/sqrt(k); the embedding never expands distances.  One and two points
    embed exactly.
    """
    dist = np.asarray(dist, dtype=float)
    validate_metric(dist)
    n = dist.shape[0]
    if n == 0:
        return np.zeros((0, 1))
    if n == 1:
        return np.zeros((1, 1))
    if n == 2:
        return np.array([[0.0], [dist[0, 1]]])
    subsets = bourgain_subsets(n, rng_seed)
    k = len(subsets)
    coords = np.empty((n, k))
    for idx, anchor in enumerate(subsets):
        coords[:, idx] = dist[:, anchor].min(axis=1)
    return coords / math.sqrt(k)


def kernel_value(rho: float) -> float:
    """kappa = exp(-rho^2) for an embedded distance rho >= 0."""
    return math.exp(-(rho * rho))


def kernel_matrix(embed: np.ndarray) -> np.ndarray:
    """Full kernel matrix from embedding rows; diagonal exactly 1."""
    sq = np.sum(embed * embed, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (embed @ embed.T)
    np.maximum(d2, 0.0, out=d2)
    K = np.exp(-d2)
    np.fill_diagonal(K, 1.0)
    return K


# -- incremental state ---------------------------------------------------------


@dataclass
class DistanceState:
    """Distances, embedding and kernel over the search history so far."""

    lam: float = 1.0
    rng_seed: int = 0
    summaries: list[ArchSummary] = field(default_factory=list)
    dist: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    embed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.summaries)

    @property
    def embed_dim(self) -> int:
        return 0 if self.embed is None else self.embed.shape[1]

    def to_json(self) -> str:
        n = len(self.summaries)
        tri = [float(self.dist[i, j]) for i in range(n) for j in range(i + 1)]
        doc = {
            "seed": self.rng_seed,
            "archive": [s.to_json() for s in self.summaries],
            "dist": tri,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str, lam: float) -> "DistanceState":
        doc = json.loads(text)
        summaries = [ArchSummary.from_json(s) for s in doc["archive"]]
        n = len(summaries)
        tri = doc["dist"]
        if len(tri) != n * (n + 1) // 2:
            raise ValueError(f"kernel state holds {len(tri)} distances for {n} entries")
        dist = np.zeros((n, n))
        it = iter(tri)
        for i in range(n):
            for j in range(i + 1):
                dist[i, j] = dist[j, i] = next(it)
        state = cls(lam=lam, rng_seed=doc["seed"], summaries=summaries, dist=dist)
        if n:
            state.embed = bourgain_embed(dist, state.rng_seed)
        return state


def extend(state: DistanceState, f_new: ArchGraph | ArchSummary) -> tuple[DistanceState, np.ndarray]:
    """Add one architecture; returns the new state and its full kernel matrix.

    The embedding is recomputed from scratch over the grown matrix with the
    stored seed (history sizes stay within tens, so this is cheap).
    """
    summary = ArchSummary.of(f_new) if isinstance(f_new, ArchGraph) else f_new
    n = len(state.summaries)
    row = np.array([summary_distance(s, summary, state.lam) for s in state.summaries])
    dist = np.zeros((n + 1, n + 1))
    dist[:n, :n] = state.dist
    dist[n, :n] = row
    dist[:n, n] = row
    embed = bourgain_embed(dist, state.rng_seed)
    new_state = DistanceState(
        lam=state.lam,
        rng_seed=state.rng_seed,
        summaries=state.summaries + [summary],
        dist=dist,
        embed=embed,
    )
    return new_state, kernel_matrix(embed)
