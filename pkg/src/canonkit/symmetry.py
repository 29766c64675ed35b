"""Finite symmetry groups of the square grid and their exact actions.

Convention: an element ``(r, f)`` acts as ``R^r F^f`` where ``F`` flips
horizontally (columns reversed) and ``R`` rotates by 90 degrees
counter-clockwise. The flip is applied first. All actions are pure index
permutations, so transformed images are bitwise copies of the input values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from canonkit.errors import ConfigError, DimensionError, GroupError
from canonkit.tensor import Tensor, permute

GROUP_NAMES = ("c1", "c2", "c4", "d4")
OUTPUT_KINDS = ("invariant", "dense", "group_logits")


@dataclass(frozen=True, order=True)
class GroupElement:
    """Rotation index ``r`` (quarter turns, CCW) and flip flag ``f``."""

    r: int = 0
    f: int = 0

    def __post_init__(self):
        if self.r not in (0, 1, 2, 3) or self.f not in (0, 1):
            raise GroupError(f"invalid group element (r={self.r}, f={self.f})")

    @property
    def is_identity(self) -> bool:
        return self.r == 0 and self.f == 0

    def matrix(self) -> np.ndarray:
        """2x2 orthogonal matrix of ``R^r F^f`` acting on (x, y) coordinates."""
        R = np.array([[0, -1], [1, 0]])
        F = np.array([[-1, 0], [0, 1]])
        return np.linalg.matrix_power(R, self.r) @ np.linalg.matrix_power(F, self.f)

    def __str__(self) -> str:
        if self.is_identity:
            return "e"
        return ("f" if self.f else "") + (f"r{self.r}" if self.r else "")


IDENTITY = GroupElement(0, 0)


def compose(g1: GroupElement, g2: GroupElement, group: Group | None = None) -> GroupElement:
    """Return ``g1 . g2`` (apply ``g2`` first)."""
    if group is not None and (g1 not in group or g2 not in group):
        raise GroupError(f"compose: {g1} or {g2} is not in {group.name}")
    r = (g1.r + (-g2.r if g1.f else g2.r)) % 4
    return GroupElement(r, g1.f ^ g2.f)


def inverse(g: GroupElement) -> GroupElement:
    if g.f:
        return g
    return GroupElement((-g.r) % 4, 0)


@dataclass(frozen=True)
class Group:
    name: str
    elements: tuple[GroupElement, ...]

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __contains__(self, g) -> bool:
        return g in self._index

    def __getitem__(self, i: int) -> GroupElement:
        return self.elements[i]

    @cached_property
    def _index(self) -> dict[GroupElement, int]:
        return {g: i for i, g in enumerate(self.elements)}

    def index(self, g: GroupElement) -> int:
        try:
            return self._index[g]
        except KeyError:
            raise GroupError(f"{g} is not an element of {self.name}") from None

    @cached_property
    def cayley(self) -> np.ndarray:
        """``cayley[i, j] = index(g_i . g_j)``."""
        n = len(self)
        table = np.empty((n, n), dtype=np.int64)
        for i, a in enumerate(self.elements):
            for j, b in enumerate(self.elements):
                table[i, j] = self.index(compose(a, b))
        return table

    @cached_property
    def inverse_index(self) -> np.ndarray:
        return np.array([self.index(inverse(g)) for g in self.elements])

    def left_translation(self, g: GroupElement) -> np.ndarray:
        """Index map ``i -> index(g^-1 . g_i)``; the permutation of per-element
        quantities induced by transforming the input with ``g``."""
        ginv = inverse(g)
        return np.array([self.index(compose(ginv, h)) for h in self.elements])


def make_group(name: str) -> Group:
    key = name.lower()
    if key == "c1":
        elems = (IDENTITY,)
    elif key == "c2":
        # the half turn; quarter-turn indices are kept so compose stays mod 4
        elems = (IDENTITY, GroupElement(2, 0))
    elif key == "c4":
        elems = tuple(GroupElement(r, 0) for r in range(4))
    elif key == "d4":
        elems = tuple(GroupElement(r, f) for f in (0, 1) for r in range(4))
    else:
        raise ConfigError(f"unknown group {name!r}; expected one of {GROUP_NAMES}")
    return Group(key, elems)


# --------------------------------------------------------------------------
# actions
# --------------------------------------------------------------------------


def _act_array(g: GroupElement, a: np.ndarray) -> np.ndarray:
    if g.f:
        a = a[..., ::-1]
    if g.r:
        a = np.rot90(a, g.r, axes=(-2, -1))
    return a


def act_image(g: GroupElement, x):
    """Transform the trailing two (square) axes of ``x`` by ``g``.

    Works on numpy arrays (returns a contiguous copy) and on Tensors
    (differentiable; the adjoint is the inverse permutation).
    """
    if x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"act_image needs a square grid, got {x.shape[-2:]}")
    if isinstance(x, Tensor):
        ginv = inverse(g)
        return permute(x, lambda a: _act_array(g, a), lambda a: np.ascontiguousarray(_act_array(ginv, a)))
    return np.ascontiguousarray(_act_array(g, np.asarray(x)))


def act_output(g: GroupElement, y, output_kind: str, group: Group | None = None):
    """Output-side counterpart of ``g`` for the three supported output kinds."""
    if output_kind == "invariant":
        return y
    if output_kind == "dense":
        return act_image(g, y)
    if output_kind == "group_logits":
        if group is None:
            raise ConfigError("group_logits output needs the group")
        perm = group.left_translation(g)
        if isinstance(y, Tensor):
            return y[perm]
        return np.asarray(y)[..., perm]
    raise ConfigError(f"unknown output kind {output_kind!r}; expected one of {OUTPUT_KINDS}")


def orbit(x: np.ndarray, group: Group) -> list[np.ndarray]:
    """``[act_image(g_i^-1, x) for g_i in group]``; entry 0 is ``x`` itself."""
    return [act_image(inverse(g), x) for g in group]


def orbit_stack(x: np.ndarray, group: Group) -> np.ndarray:
    """Batched orbit: ``[N, C, H, W] -> [N, |G|, C, H, W]`` in element order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"orbit needs a square grid, got {x.shape[-2:]}")
    return np.stack([_act_array(inverse(g), x) for g in group], axis=1)


def transform_batch(x: np.ndarray, elements: Sequence[GroupElement]) -> np.ndarray:
    """Apply a per-sample element to each image of an ``[N, C, H, W]`` batch."""
    return np.stack([act_image(g, xi) for g, xi in zip(elements, x)])
