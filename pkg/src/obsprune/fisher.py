"""Block-diagonal empirical Fisher inverses.

The curvature proxy is F = lambda*I + (1/N) * sum_i g_i g_i^T over N
per-sample gradient rows, approximated block-diagonally: weights are cut
into contiguous blocks of ``block_size`` (the last block holds the
remainder) and each block keeps its own dense inverse. Inverses are built
directly, without ever materializing F: start from (1/lambda)*I and fold
in one Sherman-Morrison rank-1 update per gradient row, in stored row
order:

    F^-1  <-  F^-1 - (F^-1 g)(F^-1 g)^T / (N + g^T F^-1 g)

``eliminate_index`` downdates an inverse after a coordinate is removed
from the system (Schur complement step): the remaining entries become the
inverse of F with that row/column deleted, and the removed row/column is
zeroed with a 0.0 sentinel on the diagonal so it can never be selected
again.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensorstore import GradientSet

#: numerical floor applied to inverse diagonals before any division
EPS_FLOOR = 1e-12

DEFAULT_BLOCK_SIZE = 64
DEFAULT_NUM_GRADS = 4096
#: default dampening per method (CLI-overridable)
DAMPENING_DEFAULTS = {"ovit": 1e-8, "wf": 1e-6, "gm": 1e-8}


class DegenerateCurvatureError(Exception):
    """Inverse diagonal at or below the numerical floor where a pivot is needed."""


class DegenerateCurvatureWarning(UserWarning):
    """A solver clamped a degenerate pivot to the floor instead of aborting."""


@dataclass(frozen=True)
class FisherConfig:
    """Hyperparameters for building block Fisher inverses.

    ``num_grads`` is a cap: builders use the first ``min(num_grads, rows)``
    gradient rows and the Sherman-Morrison denominators use that same
    count, so scoring stays consistent with the built inverse.
    """

    block_size: int = DEFAULT_BLOCK_SIZE
    dampening: float = DAMPENING_DEFAULTS["ovit"]
    num_grads: int = DEFAULT_NUM_GRADS

    def __post_init__(self) -> None:
        if int(self.block_size) < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if not (float(self.dampening) > 0.0) or not np.isfinite(self.dampening):
            raise ValueError(f"dampening must be positive and finite, got {self.dampening}")
        if int(self.num_grads) < 1:
            raise ValueError(f"num_grads must be >= 1, got {self.num_grads}")


def block_partition(dim: int, block_size: int) -> list[int]:
    """Contiguous block sizes covering ``dim``: full blocks plus the remainder."""
    if dim < 1:
        raise ValueError(f"dimension must be >= 1, got {dim}")
    sizes = [block_size] * (dim // block_size)
    if dim % block_size:
        sizes.append(dim % block_size)
    return sizes


@dataclass
class FisherBlockInverse:
    """Dense per-block inverses of the dampened empirical Fisher.

    ``offsets`` has one entry per block plus a trailing ``global_dim``;
    block ``b`` covers global indices ``offsets[b]:offsets[b+1]``.
    """

    blocks: list[np.ndarray]
    config: FisherConfig
    offsets: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.offsets is None:
            sizes = [b.shape[0] for b in self.blocks]
            self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        else:
            self.offsets = np.asarray(self.offsets, dtype=np.int64)

    @property
    def global_dim(self) -> int:
        return int(self.offsets[-1])

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_of(self, i: int) -> tuple[int, int]:
        """Map a global index to (block id, index within block)."""
        if not 0 <= i < self.global_dim:
            raise IndexError(f"index {i} out of range for dim {self.global_dim}")
        b = int(np.searchsorted(self.offsets, i, side="right") - 1)
        return b, int(i - self.offsets[b])

    def diagonal(self) -> np.ndarray:
        """Global inverse diagonal (unclamped)."""
        return np.concatenate([np.diagonal(b) for b in self.blocks])

    def copy(self) -> "FisherBlockInverse":
        return FisherBlockInverse(
            [b.copy() for b in self.blocks], self.config, self.offsets.copy()
        )


def _sm_updates(inv3: np.ndarray, rows3: np.ndarray, denom_count: int) -> None:
    """Apply one Sherman-Morrison update per gradient row, in row order.

    ``inv3`` is (nblocks, B, B) and is updated in place; ``rows3`` is
    (nrows, nblocks, B). Batched over blocks, sequential over rows, so the
    per-block arithmetic is identical to a plain per-block loop.
    """
    for g in rows3:
        v = np.einsum("mij,mj->mi", inv3, g)
        denom = denom_count + np.einsum("mi,mi->m", g, v)
        inv3 -= v[:, :, None] * v[:, None, :] / denom[:, None, None]


def build_fisher_inverse(
    grads: GradientSet | np.ndarray, config: FisherConfig
) -> FisherBlockInverse:
    """Build per-block inverses of lambda*I + (1/N) sum g g^T.

    Raises ValueError on non-finite gradients or an empty sample set.
    """
    samples = grads.samples if isinstance(grads, GradientSet) else np.asarray(grads)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("gradient samples must be a non-empty (N, d) array")
    if not np.all(np.isfinite(samples)):
        raise ValueError("gradient samples contain non-finite values")
    n_used = min(int(config.num_grads), samples.shape[0])
    samples = samples[:n_used]
    dim = samples.shape[1]
    sizes = block_partition(dim, config.block_size)
    lam = float(config.dampening)

    blocks: list[np.ndarray] = [None] * len(sizes)  # type: ignore[list-item]
    n_main = sum(1 for s in sizes if s == config.block_size)
    bs = config.block_size
    if n_main:
        inv3 = np.tile(np.eye(bs) / lam, (n_main, 1, 1))
        rows3 = samples[:, : n_main * bs].reshape(n_used, n_main, bs)
        _sm_updates(inv3, rows3, n_used)
        for b in range(n_main):
            blocks[b] = inv3[b]
    if len(sizes) > n_main:  # trailing partial block
        rem = sizes[-1]
        inv3 = (np.eye(rem) / lam)[None, :, :].copy()
        rows3 = samples[:, n_main * bs :].reshape(n_used, 1, rem)
        _sm_updates(inv3, rows3, n_used)
        blocks[-1] = inv3[0]
    return FisherBlockInverse(blocks, config)


def concat_inverses(parts: Sequence[FisherBlockInverse]) -> FisherBlockInverse:
    """Stack per-layer inverses into one global block structure.

    Blocks never span layers: the result's partition is the concatenation
    of the parts' partitions, in order.
    """
    if not parts:
        raise ValueError("need at least one inverse to concatenate")
    blocks = [b for p in parts for b in p.blocks]
    return FisherBlockInverse(blocks, parts[0].config)


def eliminate_index(inv_block: np.ndarray, i: int, floor: float = EPS_FLOOR) -> np.ndarray:
    """Downdate a block inverse after removing coordinate ``i``.

    Returns a new matrix equal to inv - (inv e_i)(inv e_i)^T / inv[i,i]
    with row/column ``i`` zeroed and a 0.0 diagonal sentinel. The
    surviving entries are the inverse of the original F with row/column
    ``i`` deleted. Raises DegenerateCurvatureError when the pivot is at or
    below ``floor``; callers that must not abort clamp and retry.
    """
    pivot = float(inv_block[i, i])
    if not np.isfinite(pivot) or pivot <= floor:
        raise DegenerateCurvatureError(
            f"pivot {pivot:.3e} at index {i} is at or below the {floor:.0e} floor"
        )
    col = inv_block[:, i].copy()
    out = inv_block - np.outer(col, col) / pivot
    out[i, :] = 0.0
    out[:, i] = 0.0
    out[i, i] = 0.0
    return out


def eliminate_index_clamped(inv_block: np.ndarray, i: int) -> np.ndarray:
    """Like ``eliminate_index`` but clamps degenerate pivots with a warning."""
    try:
        return eliminate_index(inv_block, i)
    except DegenerateCurvatureError:
        warnings.warn(
            f"clamping degenerate pivot at index {i} to {EPS_FLOOR:.0e}",
            DegenerateCurvatureWarning,
            stacklevel=2,
        )
        patched = inv_block.copy()
        patched[i, i] = EPS_FLOOR
        return eliminate_index(patched, i, floor=0.0)


def freeze_indices(inv: FisherBlockInverse, frozen: Iterable[int]) -> FisherBlockInverse:
    """Eliminate ``frozen`` global coordinates from the inverse.

    The result is the inverse of the Fisher restricted to the movable
    subspace: columns at frozen coordinates are zero, so no compensating
    update computed from it can touch a frozen weight.
    """
    out = inv.copy()
    per_block: dict[int, list[int]] = {}
    for g in frozen:
        b, local = out.block_of(int(g))
        per_block.setdefault(b, []).append(local)
    for b, locals_ in per_block.items():
        blk = out.blocks[b]
        for j in sorted(locals_):
            blk = eliminate_index_clamped(blk, j)
        out.blocks[b] = blk
    return out
