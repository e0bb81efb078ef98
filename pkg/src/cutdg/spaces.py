"""Extended DG space structure on a cut-cell mesh.

The global coefficient vector is laid out block-wise: one block per
present (cell, species) pair, cells ascending, species NEG before POS.
Within a block, variables ascend, then modes ascend (modes are ordered by
total degree, see :mod:`cutdg.basis`).  Cut cells carry upper-triangular
factors S with S^T M_cut S = I that re-orthonormalize the basis on the
species sub-region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .basis import ReferenceBasis, space_dimension
from .cutcells import CutCellMesh, quad_volume
from .errors import (
    DimensionMismatchError,
    InsufficientAgglomerationError,
    InvalidConfigError,
)
from .quadrature import NEG, POS, SPECIES

CHOLESKY_PIVOT_RTOL = 1e-13


@dataclass(frozen=True)
class ModeStructure:
    """Per-variable polynomial degrees and the derived mode layout."""

    degrees: tuple[int, ...]
    dim: int

    @property
    def mode_counts(self) -> tuple[int, ...]:
        return tuple(space_dimension(k, self.dim) for k in self.degrees)

    @property
    def block_size(self) -> int:
        return sum(self.mode_counts)

    @property
    def max_degree(self) -> int:
        return max(self.degrees)

    def var_offset(self, var: int) -> int:
        return sum(self.mode_counts[:var])

    def low_mode_mask(self, low_degrees: Sequence[int]) -> np.ndarray:
        """Boolean mask over one block: True for modes of total degree
        <= low_degrees[var]."""
        if len(low_degrees) != len(self.degrees):
            raise InvalidConfigError("low_degrees length mismatch")
        mask = np.zeros(self.block_size, dtype=bool)
        for var, (k, k_lo) in enumerate(zip(self.degrees, low_degrees)):
            if not 0 <= k_lo <= k:
                raise InvalidConfigError(
                    f"low degree {k_lo} outside [0, {k}] for variable {var}"
                )
            off = self.var_offset(var)
            mask[off : off + space_dimension(k_lo, self.dim)] = True
        return mask


class XdgIndexMap:
    """Bijection between (cell, variable, species, mode) and flat indices."""

    def __init__(self, cutmesh: CutCellMesh, degrees: Sequence[int]):
        if cutmesh.num_cells == 0:
            raise InvalidConfigError("empty mesh")
        if len(degrees) == 0:
            raise InvalidConfigError("need at least one variable degree")
        self.cutmesh = cutmesh
        self.modes = ModeStructure(
            degrees=tuple(int(k) for k in degrees), dim=cutmesh.mesh.dim
        )
        blocks: list[tuple[int, int]] = []
        for j in range(cutmesh.num_cells):
            for s in SPECIES:
                if cutmesh.present(j, s):
                    blocks.append((j, s))
        self.blocks = blocks
        self.block_index = {bs: i for i, bs in enumerate(blocks)}
        size = self.modes.block_size
        self.block_size = size
        self.block_offsets = np.arange(len(blocks) + 1) * size

    @property
    def L(self) -> int:
        return int(self.block_offsets[-1])

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_of(self, j: int, species: int) -> int:
        key = (j, species)
        if key not in self.block_index:
            raise DimensionMismatchError(
                f"no block for cell {j}, species {species}"
            )
        return self.block_index[key]

    def block_slice(self, block: int) -> slice:
        return slice(
            int(self.block_offsets[block]), int(self.block_offsets[block + 1])
        )

    def flat(self, j: int, var: int, species: int, mode: int) -> int:
        if not 0 <= var < len(self.modes.degrees):
            raise DimensionMismatchError(f"variable {var} out of range")
        if not 0 <= mode < self.modes.mode_counts[var]:
            raise DimensionMismatchError(f"mode {mode} out of range")
        b = self.block_of(j, species)
        return int(
            self.block_offsets[b] + self.modes.var_offset(var) + mode
        )

    def invert(self, flat: int) -> tuple[int, int, int, int]:
        if not 0 <= flat < self.L:
            raise DimensionMismatchError(f"flat index {flat} out of range")
        b, rem = divmod(flat, self.block_size)
        j, species = self.blocks[b]
        for var in reversed(range(len(self.modes.degrees))):
            off = self.modes.var_offset(var)
            if rem >= off:
                return j, var, species, rem - off
        raise AssertionError("unreachable")

    def indices_low(
        self, low_degrees: Sequence[int], cells: Optional[set] = None
    ) -> np.ndarray:
        """Flat indices of all low-order modes, optionally restricted to a
        cell subset."""
        mask = self.modes.low_mode_mask(low_degrees)
        rel = np.flatnonzero(mask)
        out = []
        for b, (j, _s) in enumerate(self.blocks):
            if cells is None or j in cells:
                out.append(self.block_offsets[b] + rel)
        return (
            np.concatenate(out) if out else np.zeros(0, dtype=int)
        )

    def indices_high(self, j: int, low_degrees: Sequence[int]) -> np.ndarray:
        """Flat indices of the high-order modes of one cell (all species)."""
        mask = self.modes.low_mode_mask(low_degrees)
        rel = np.flatnonzero(~mask)
        out = []
        for s in SPECIES:
            if self.cutmesh.present(j, s):
                b = self.block_of(j, s)
                out.append(self.block_offsets[b] + rel)
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


@dataclass
class SpeciesOrthoBlocks:
    """Per-(cut cell, species) upper-triangular re-orthonormalization
    factors; uncut cells use the identity (no entry stored)."""

    basis: ReferenceBasis
    factors: dict

    def factor(self, j: int, species: int) -> Optional[np.ndarray]:
        return self.factors.get((j, species))


def cholesky_with_pivot_check(
    M: np.ndarray, rtol: float = CHOLESKY_PIVOT_RTOL, context: str = ""
) -> np.ndarray:
    """Lower Cholesky factor, failing on pivots below rtol * max diagonal."""
    n = len(M)
    L = np.zeros_like(M)
    threshold = rtol * float(np.max(np.diag(M)))
    for i in range(n):
        s = M[i, i] - L[i, :i] @ L[i, :i]
        if not s > threshold:
            raise InsufficientAgglomerationError(
                f"mass-matrix pivot {s:.3e} below threshold {threshold:.3e}"
                + (f" ({context})" if context else "")
            )
        L[i, i] = np.sqrt(s)
        if i + 1 < n:
            L[i + 1 :, i] = (M[i + 1 :, i] - L[i + 1 :, :i] @ L[i, :i]) / L[i, i]
    return L


def build_species_orthonormalization(
    cutmesh: CutCellMesh, basis: ReferenceBasis
) -> SpeciesOrthoBlocks:
    """Upper-triangular S per cut (cell, species) with S^T M_cut S = I,
    from a Cholesky factorization of the species-restricted mass matrix."""
    factors = {}
    for (j, s), rule in sorted(cutmesh.cut_volume_rules.items()):
        lo, hi = cutmesh.mesh.cell_bounds(j)
        vals = basis.eval(lo, hi, rule.nodes)
        mass = vals.T @ (vals * rule.weights[:, None])
        mass = 0.5 * (mass + mass.T)
        try:
            L = cholesky_with_pivot_check(
                mass,
                context=f"cell {j}, species {s}, "
                f"fraction {cutmesh.fraction(j, s):.4g}",
            )
        except InsufficientAgglomerationError:
            raise
        # S = L^{-T} is upper-triangular with S^T M S = I
        S = np.linalg.solve(L, np.eye(len(L))).T
        factors[(j, s)] = S
    return SpeciesOrthoBlocks(basis=basis, factors=factors)


def build_index_map(cutmesh: CutCellMesh, degrees) -> XdgIndexMap:
    """Index map for the given per-variable degree vector (a scalar degree
    is promoted to a one-variable vector)."""
    if np.isscalar(degrees):
        degrees = (int(degrees),)
    return XdgIndexMap(cutmesh, degrees)


def evaluate_species_basis(
    cutmesh: CutCellMesh,
    ortho: SpeciesOrthoBlocks,
    j: int,
    species: int,
    points: np.ndarray,
    with_grad: bool = False,
):
    """Orthonormalized basis values (and gradients) of one (cell, species)
    at physical points."""
    lo, hi = cutmesh.mesh.cell_bounds(j)
    S = ortho.factor(j, species)
    if with_grad:
        vals, grads = ortho.basis.eval_with_grad(lo, hi, points)
        if S is not None:
            vals = vals @ S
            grads = np.einsum("pnd,nm->pmd", grads, S)
        return vals, grads
    vals = ortho.basis.eval(lo, hi, points)
    if S is not None:
        vals = vals @ S
    return vals
