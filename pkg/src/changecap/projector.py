"""Multimodal projector: visual feature space -> word-embedding space.

Token count drops 4x via a non-overlapping 2x2 spatial merge (so the merge
itself is invertible), then a two-layer GELU MLP maps each merged vector into
the decoder's embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ce import GeometryError, grid_side
from .rng import SplitMix64
from .tensor import Tensor


def _merge_order(s: int) -> np.ndarray:
    """Row order that groups each 2x2 block as TL, TR, BL, BR, blocks row-major."""
    order = []
    for br in range(s // 2):
        for bc in range(s // 2):
            r, c = 2 * br, 2 * bc
            order.extend([r * s + c, r * s + c + 1, (r + 1) * s + c, (r + 1) * s + c + 1])
    return np.asarray(order, dtype=np.int64)


def space_to_depth_2x2(x: Tensor) -> Tensor:
    """[L_V, D_V] -> [L_V/4, 4*D_V] by concatenating each 2x2 patch block."""
    lv, dv = x.shape
    s = grid_side(lv)
    if s % 2 != 0:
        raise GeometryError(f"grid side {s} must be even for 2x2 merging")
    grouped = T.take_rows(x, _merge_order(s))
    return T.reshape(grouped, (lv // 4, 4 * dv))


def depth_to_space_2x2(x: Tensor, dv: int) -> Tensor:
    """Inverse of space_to_depth_2x2 (exact, it is a permutation)."""
    ld, four_dv = x.shape
    if four_dv != 4 * dv:
        raise GeometryError(f"cannot ungroup width {four_dv} into 4 x {dv}")
    lv = ld * 4
    s = grid_side(lv)
    rows = T.reshape(x, (lv, dv))
    inverse = np.argsort(_merge_order(s))
    return T.take_rows(rows, inverse)


@dataclass
class ProjectedEmbedding:
    """Visual tokens living in word-embedding space: [L_d, D_L] with L_d = L_V/4."""

    tokens: Tensor

    @property
    def ld(self) -> int:
        return self.tokens.shape[0]

    @property
    def dl(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ProjectorParams:
    """Two-layer MLP over merged patch vectors: 4*D_V -> hidden -> D_L."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, dv: int, dl: int, seed: int = 0, hidden: int | None = None, sigma: float = 0.02) -> "ProjectorParams":
        hidden = dl if hidden is None else hidden
        master = SplitMix64(seed)
        return cls(
            w1=T.seeded_normal((4 * dv, hidden), sigma, master.spawn_seed(), requires_grad=True),
            b1=T.zeros((hidden,), requires_grad=True),
            w2=T.seeded_normal((hidden, dl), sigma, master.spawn_seed(), requires_grad=True),
            b2=T.zeros((dl,), requires_grad=True),
        )

    def named(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())


def project(x: Tensor, params: ProjectorParams) -> ProjectedEmbedding:
    """Map [L_V, D_V] features to [L_V/4, D_L] word-space tokens."""
    h = T.gelu(T.add(T.matmul(space_to_depth_2x2(x), params.w1), params.b1))
    return ProjectedEmbedding(T.add(T.matmul(h, params.w2), params.b2))
