"""Greedy one-at-a-time elimination with per-block traces and a global merge.

Each Fisher block is solved independently: repeatedly pick the live
prunable weight with the smallest single-weight saliency (ties go to the
lowest index), apply its compensating update inside the block, fold its
cost into a running per-block total ``err``, record ``err`` as the
weight's *global* score, snapshot the block weights, and downdate the
block inverse. Because the recorded score is cumulative, pruning any
prefix of a block's elimination order costs exactly the last recorded
score of that prefix, and pruning k weights globally reduces to sorting
all recorded scores ascending (ties by global index) and reloading each
block's snapshot at its selected prefix length.

Per block of size B this costs O(B^3) time and O(B^2) trace storage,
O(d*B^2) time and O(d*B) space overall.

The N:M variant runs the same loop but skips any weight whose aligned
group of m consecutive weights (row-major, within a layer) already has
m-n zeroed entries, and stops when every group reached its quota.

Non-prunable coordinates are eliminated from the block inverse up front
without touching their weights, which freezes them: no compensation
computed from the reduced inverse can move them, and they can never be
selected.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fisher import EPS_FLOOR, FisherBlockInverse, eliminate_index_clamped


class InternalSolverError(AssertionError):
    """A should-be-impossible state (e.g. non-prefix selection) was reached."""


@dataclass(frozen=True)
class LayerLayout:
    """Where one layer's row-major flattened weights sit in the global vector."""

    name: str
    offset: int
    size: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class SaliencyRecord:
    """One elimination event: global score (cumulative block cost) plus position."""

    global_index: int
    score: float
    block_id: int
    elim_rank: int


@dataclass
class BlockTrace:
    """Elimination order, cumulative costs and weight snapshots for one block."""

    block_id: int
    order: np.ndarray  # (steps,) within-block indices, elimination order
    cumulative: np.ndarray  # (steps,) non-decreasing cumulative cost
    states: np.ndarray  # (steps, B) block weights after each step
    pinned_steps: int = 0
    clamp_events: int = 0

    @property
    def steps(self) -> int:
        return int(self.order.size)

    def records(self, offset: int = 0) -> list[SaliencyRecord]:
        return [
            SaliencyRecord(int(offset + self.order[t]), float(self.cumulative[t]),
                           self.block_id, t)
            for t in range(self.steps)
        ]


@dataclass
class PruneResult:
    """Global mask (u8, 1 = kept), compensated weights, and model-cost summary."""

    mask: np.ndarray
    new_weights: np.ndarray
    predicted_loss_increase: float
    per_layer_sparsity: dict[str, float] = field(default_factory=dict)
    per_layer_predicted: dict[str, float] = field(default_factory=dict)
    layout: tuple[LayerLayout, ...] = ()


def _default_layout(dim: int) -> tuple[LayerLayout, ...]:
    return (LayerLayout("weights", 0, dim, (dim,)),)


def _greedy_eliminate(
    w: np.ndarray,
    inv: np.ndarray,
    alive: np.ndarray,
    pinned_list: list[int],
    block_id: int,
    max_steps: int,
) -> BlockTrace:
    """Greedy min-saliency elimination over the live entries of one block."""
    dim = w.size
    order = np.empty(max_steps, dtype=np.int64)
    cumulative = np.empty(max_steps, dtype=np.float64)
    states = np.empty((max_steps, dim), dtype=np.float64)
    err = 0.0
    clamps = 0
    t = 0
    while t < max_steps:
        if t < len(pinned_list):
            i = pinned_list[t]
        else:
            live = np.flatnonzero(alive)
            if live.size == 0:
                break
            diag = np.maximum(inv[live, live], EPS_FLOOR)
            rho = w[live] ** 2 / (2.0 * diag)
            i = int(live[int(np.argmin(rho))])  # first min = lowest index
        pivot = max(float(inv[i, i]), EPS_FLOOR)
        rho_i = float(w[i]) ** 2 / (2.0 * pivot)
        w += -(w[i] / pivot) * inv[:, i]
        w[i] = 0.0
        err += rho_i
        order[t] = i
        cumulative[t] = err
        states[t] = w
        if inv[i, i] <= EPS_FLOOR:
            clamps += 1
        inv = eliminate_index_clamped(inv, i)
        alive[i] = False
        t += 1
    return BlockTrace(
        block_id, order[:t], cumulative[:t], states[:t],
        pinned_steps=len(pinned_list), clamp_events=clamps,
    )


def solve_block(
    w_block: np.ndarray,
    inv_block: np.ndarray,
    prunable: np.ndarray | None = None,
    pinned: Sequence[int] = (),
    block_id: int = 0,
) -> BlockTrace:
    """Run the greedy loop to exhaustion on one block.

    ``pinned`` indices (must be prunable) are eliminated first, in index
    order, before any saliency-based selection; they exist so that a
    caller can force previously-pruned weights to stay pruned.
    """
    w = np.array(w_block, dtype=np.float64)
    inv = np.array(inv_block, dtype=np.float64)
    if inv.shape != (w.size, w.size):
        raise ValueError(f"inverse block shape {inv.shape} does not match {w.size} weights")
    if prunable is None:
        alive = np.ones(w.size, dtype=bool)
    else:
        alive = np.asarray(prunable, dtype=bool).copy()
        if alive.shape != (w.size,):
            raise ValueError("prunable mask shape does not match block")
    pinned_list = sorted(int(p) for p in pinned)
    for p in pinned_list:
        if not alive[p]:
            raise ValueError(f"pinned index {p} is not prunable")
    for j in np.flatnonzero(~alive):
        inv = eliminate_index_clamped(inv, int(j))
    return _greedy_eliminate(
        w, inv, alive, pinned_list, block_id, max_steps=int(alive.sum())
    )


def _block_inputs(
    w: np.ndarray,
    inv: FisherBlockInverse,
    prunable: np.ndarray,
    pinned: np.ndarray,
) -> list[tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    jobs = []
    for b in range(inv.num_blocks):
        lo, hi = int(inv.offsets[b]), int(inv.offsets[b + 1])
        jobs.append((b, w[lo:hi], inv.blocks[b], prunable[lo:hi],
                     np.flatnonzero(pinned[lo:hi])))
    return jobs


def _run_blockwise(jobs, fn, threads: int) -> list[BlockTrace]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _validate_inputs(w, inv, prunable, pinned):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weights must be a flat vector")
    if inv.global_dim != w.size:
        raise ValueError(
            f"inverse covers {inv.global_dim} weights, got {w.size}"
        )
    if prunable is None:
        pr = np.ones(w.size, dtype=bool)
    else:
        pr = np.asarray(prunable, dtype=bool)
        if pr.shape != w.shape:
            raise ValueError("prunable mask shape does not match weights")
    pin = np.zeros(w.size, dtype=bool)
    if pinned is not None:
        idx = np.asarray(list(pinned), dtype=np.int64)
        if idx.size:
            pin[idx] = True
            if np.any(pin & ~pr):
                raise ValueError("pinned indices must be prunable")
    return w, pr, pin


def _layer_for_block(layout: tuple[LayerLayout, ...], lo: int, hi: int) -> LayerLayout:
    for lay in layout:
        if lay.offset <= lo and hi <= lay.offset + lay.size:
            return lay
    raise ValueError(f"block [{lo}, {hi}) does not sit inside any layer")


def _assemble(
    w: np.ndarray,
    inv: FisherBlockInverse,
    traces: list[BlockTrace],
    take_per_block: np.ndarray,
    layout: tuple[LayerLayout, ...],
) -> PruneResult:
    new_w = w.copy()
    mask = np.ones(w.size, dtype=np.uint8)
    predicted = 0.0
    per_layer_pred = {lay.name: 0.0 for lay in layout}
    for b, trace in enumerate(traces):
        tb = int(take_per_block[b])
        lo, hi = int(inv.offsets[b]), int(inv.offsets[b + 1])
        if tb:
            new_w[lo:hi] = trace.states[tb - 1]
            mask[lo + trace.order[:tb]] = 0
            cost = float(trace.cumulative[tb - 1])
            predicted += cost
            per_layer_pred[_layer_for_block(layout, lo, hi).name] += cost
    per_layer_sparsity = {
        lay.name: float(np.count_nonzero(mask[lay.offset : lay.offset + lay.size] == 0))
        / lay.size
        for lay in layout
    }
    return PruneResult(
        mask=mask,
        new_weights=new_w,
        predicted_loss_increase=predicted,
        per_layer_sparsity=per_layer_sparsity,
        per_layer_predicted=per_layer_pred,
        layout=layout,
    )


def solve_global(
    w: np.ndarray,
    inv: FisherBlockInverse,
    k: int,
    prunable: np.ndarray | None = None,
    pinned: Sequence[int] | None = None,
    threads: int = 1,
    layout: tuple[LayerLayout, ...] | None = None,
) -> PruneResult:
    """Prune the k globally cheapest weights by cumulative block cost.

    Sorts every elimination record ascending by (score, global index) and
    marks the first k as pruned; each block then reloads its snapshot at
    the selected prefix length. Pinned records sort before unpinned ones
    only among exactly equal scores, which keeps previously-pruned weights
    pruned without disturbing the tie rule anywhere else.
    """
    w, pr, pin = _validate_inputs(w, inv, prunable, pinned)
    total_prunable = int(pr.sum())
    if not 0 <= k <= total_prunable:
        raise ValueError(f"k={k} out of range; {total_prunable} weights are prunable")
    if layout is None:
        layout = _default_layout(w.size)

    jobs = _block_inputs(w, inv, pr, pin)
    traces = _run_blockwise(
        jobs, lambda j: solve_block(j[1], j[2], j[3], pinned=j[4], block_id=j[0]), threads
    )

    scores = np.concatenate([t.cumulative for t in traces]) if traces else np.empty(0)
    gidx = np.concatenate(
        [t.order + int(inv.offsets[b]) for b, t in enumerate(traces)]
    ) if traces else np.empty(0, dtype=np.int64)
    block_ids = np.concatenate(
        [np.full(t.steps, b, dtype=np.int64) for b, t in enumerate(traces)]
    ) if traces else np.empty(0, dtype=np.int64)
    unpinned = np.concatenate(
        [
            np.r_[np.zeros(t.pinned_steps), np.ones(t.steps - t.pinned_steps)]
            for t in traces
        ]
    ) if traces else np.empty(0)

    chosen = np.lexsort((gidx, unpinned, scores))[:k]
    take = np.bincount(block_ids[chosen], minlength=inv.num_blocks)

    # bug trap: the selected set inside each block must be a prefix of its
    # elimination order, otherwise reloading snapshot t is meaningless
    sel_gidx = gidx[chosen]
    sel_block = block_ids[chosen]
    for b, trace in enumerate(traces):
        tb = int(take[b])
        if tb == 0:
            continue
        got = np.sort(sel_gidx[sel_block == b])
        want = np.sort(trace.order[:tb] + int(inv.offsets[b]))
        if not np.array_equal(got, want):
            raise InternalSolverError(
                f"block {b}: selected set is not a prefix of the elimination order"
            )
    return _assemble(w, inv, traces, take, layout)


def solve_nm(
    w: np.ndarray,
    inv: FisherBlockInverse,
    n: int,
    m: int,
    prunable: np.ndarray | None = None,
    threads: int = 1,
    layout: tuple[LayerLayout, ...] | None = None,
) -> PruneResult:
    """Greedy elimination under an n-of-m pattern: every aligned group of m
    consecutive weights ends with exactly m-n mask zeros.

    A weight is skipped once its group reached the quota; groups whose
    prunable membership is below m-n reach a reduced quota (prunability
    wins). Requires every layer size and every block boundary to be a
    multiple of m so groups never straddle blocks or layers.
    """
    if not (0 < n < m):
        raise ValueError(f"need 0 < n < m, got {n}:{m}")
    w, pr, _ = _validate_inputs(w, inv, prunable, None)
    if layout is None:
        layout = _default_layout(w.size)
    for lay in layout:
        if lay.size % m:
            raise ValueError(
                f"layer {lay.name!r} has {lay.size} weights, not divisible by m={m}"
            )
    if np.any(np.asarray(inv.offsets) % m):
        raise ValueError(
            f"block boundaries must be multiples of m={m}; "
            "use a block size that m divides"
        )

    quota_full = m - n

    def solve_one(job) -> BlockTrace:
        b, wb, invb, prb, _ = job
        wb = np.array(wb, dtype=np.float64)
        invb = np.array(invb, dtype=np.float64)
        alive = np.asarray(prb, dtype=bool).copy()
        for j in np.flatnonzero(~alive):
            invb = eliminate_index_clamped(invb, int(j))
        gid = np.arange(wb.size) // m
        n_groups = wb.size // m
        quota = np.minimum(quota_full, np.bincount(gid[alive], minlength=n_groups))
        counts = np.zeros(n_groups, dtype=np.int64)
        dim = wb.size
        max_steps = int(quota.sum())
        order = np.empty(max_steps, dtype=np.int64)
        cumulative = np.empty(max_steps, dtype=np.float64)
        states = np.empty((max_steps, dim), dtype=np.float64)
        err = 0.0
        clamps = 0
        t = 0
        while t < max_steps:
            live = np.flatnonzero(alive & (counts[gid] < quota[gid]))
            if live.size == 0:
                break
            diag = np.maximum(invb[live, live], EPS_FLOOR)
            rho = wb[live] ** 2 / (2.0 * diag)
            i = int(live[int(np.argmin(rho))])
            pivot = max(float(invb[i, i]), EPS_FLOOR)
            rho_i = float(wb[i]) ** 2 / (2.0 * pivot)
            wb += -(wb[i] / pivot) * invb[:, i]
            wb[i] = 0.0
            err += rho_i
            order[t] = i
            cumulative[t] = err
            states[t] = wb
            if invb[i, i] <= EPS_FLOOR:
                clamps += 1
            invb = eliminate_index_clamped(invb, i)
            alive[i] = False
            counts[gid[i]] += 1
            t += 1
        return BlockTrace(b, order[:t], cumulative[:t], states[:t], 0, clamps)

    jobs = _block_inputs(w, inv, pr, np.zeros(w.size, dtype=bool))
    traces = _run_blockwise(jobs, solve_one, threads)
    take = np.array([t.steps for t in traces], dtype=np.int64)
    return _assemble(w, inv, traces, take, layout)


def nm_violations(mask: np.ndarray, n: int, m: int) -> int:
    """Count aligned m-groups whose mask keeps more than n entries.

    A group with *extra* zeros still fits the hardware pattern, so only
    under-sparse groups (fewer than m-n mask zeros) are violations.
    """
    mask = np.asarray(mask).reshape(-1)
    if mask.size % m:
        raise ValueError(f"mask size {mask.size} is not divisible by m={m}")
    kept = (mask != 0).reshape(-1, m).sum(axis=1)
    return int(np.count_nonzero(kept > n))
