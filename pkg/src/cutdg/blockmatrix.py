"""Variable-block sparse matrices with dense blocks, plus a stored-
factorization direct solver and MatrixMarket export.

Blocks are keyed by (block-row, block-col) pairs; inserting into an
existing key accumulates (additive assembly).  Matrix-vector products run
through a cached CSR form; matrix-matrix products run natively on the
block structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DimensionMismatchError,
    LayoutMismatchError,
    SingularSystemError,
)


@dataclass(frozen=True)
class BlockLayout:
    """Sizes of the consecutive blocks of one axis of a block matrix."""

    sizes: tuple[int, ...]

    @property
    def offsets(self) -> np.ndarray:
        cached = self.__dict__.get("_offsets")
        if cached is None:
            cached = np.concatenate([[0], np.cumsum(self.sizes)])
            object.__setattr__(self, "_offsets", cached)
        return cached

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    @property
    def num_blocks(self) -> int:
        return len(self.sizes)

    def block_slice(self, b: int) -> slice:
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))


def uniform_layout(num_blocks: int, block_size: int) -> BlockLayout:
    return BlockLayout(sizes=(block_size,) * num_blocks)


class BlockSparseMatrix:
    def __init__(self, row_layout: BlockLayout, col_layout: BlockLayout):
        self.row_layout = row_layout
        self.col_layout = col_layout
        self.blocks: dict[tuple[int, int], np.ndarray] = {}
        self._csr: Optional[sp.csr_matrix] = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.row_layout.dim, self.col_layout.dim)

    def add_block(self, bi: int, bj: int, block: np.ndarray) -> None:
        expected = (self.row_layout.sizes[bi], self.col_layout.sizes[bj])
        if block.shape != expected:
            raise DimensionMismatchError(
                f"block ({bi},{bj}) has shape {block.shape}, expected {expected}"
            )
        key = (bi, bj)
        if key in self.blocks:
            self.blocks[key] = self.blocks[key] + block
        else:
            self.blocks[key] = np.array(block, dtype=float)
        self._csr = None

    def get_block(self, bi: int, bj: int) -> Optional[np.ndarray]:
        return self.blocks.get((bi, bj))

    @property
    def num_nonzero_blocks(self) -> int:
        return len(self.blocks)

    @property
    def nnz(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def tocsr(self) -> sp.csr_matrix:
        if self._csr is None:
            rows = []
            cols = []
            vals = []
            ro = self.row_layout.offsets
            co = self.col_layout.offsets
            for (bi, bj), block in sorted(self.blocks.items()):
                m, n = block.shape
                r = np.repeat(np.arange(m) + ro[bi], n)
                c = np.tile(np.arange(n) + co[bj], m)
                rows.append(r)
                cols.append(c)
                vals.append(block.ravel())
            if rows:
                data = (
                    np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols)),
                )
                csr = sp.coo_matrix(data, shape=self.shape).tocsr()
            else:
                csr = sp.csr_matrix(self.shape)
            self._csr = csr
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self.tocsr().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.shape[1],):
            raise DimensionMismatchError(
                f"vector of length {x.shape} against matrix {self.shape}"
            )
        return self.tocsr() @ x

    def transpose(self) -> "BlockSparseMatrix":
        out = BlockSparseMatrix(self.col_layout, self.row_layout)
        for (bi, bj), block in self.blocks.items():
            out.blocks[(bj, bi)] = block.T
        return out

    def matmat(self, other: "BlockSparseMatrix") -> "BlockSparseMatrix":
        if self.col_layout.sizes != other.row_layout.sizes:
            raise LayoutMismatchError(
                "inner block layouts do not match for matmat"
            )
        out = BlockSparseMatrix(self.row_layout, other.col_layout)
        by_row: dict[int, list[tuple[int, np.ndarray]]] = {}
        for (bk, bj), block in other.blocks.items():
            by_row.setdefault(bk, []).append((bj, block))
        acc = out.blocks
        for (bi, bk), a_block in sorted(self.blocks.items()):
            for bj, b_block in by_row.get(bk, ()):
                key = (bi, bj)
                prod = a_block @ b_block
                if key in acc:
                    acc[key] += prod
                else:
                    acc[key] = prod
        return out

    def extract_block_submatrix(
        self, row_blocks, col_blocks
    ) -> "BlockSparseMatrix":
        """Submatrix on a subset of block rows/cols (renumbered densely in
        the given order)."""
        rmap = {b: i for i, b in enumerate(row_blocks)}
        cmap = {b: i for i, b in enumerate(col_blocks)}
        out = BlockSparseMatrix(
            BlockLayout(tuple(self.row_layout.sizes[b] for b in row_blocks)),
            BlockLayout(tuple(self.col_layout.sizes[b] for b in col_blocks)),
        )
        for (bi, bj), block in self.blocks.items():
            if bi in rmap and bj in cmap:
                out.blocks[(rmap[bi], cmap[bj])] = block
        return out

    def restrict_modes(self, row_modes: int, col_modes: int) -> sp.csr_matrix:
        """CSR of the sub-system keeping the first ``row_modes`` /
        ``col_modes`` entries of every block (all blocks must be at least
        that large)."""
        if self.row_layout.sizes and min(self.row_layout.sizes) < row_modes:
            raise DimensionMismatchError("row_modes exceeds a block size")
        if self.col_layout.sizes and min(self.col_layout.sizes) < col_modes:
            raise DimensionMismatchError("col_modes exceeds a block size")
        rows = []
        cols = []
        vals = []
        nr = self.row_layout.num_blocks
        nc = self.col_layout.num_blocks
        for (bi, bj), block in sorted(self.blocks.items()):
            sub = block[:row_modes, :col_modes]
            r = np.repeat(np.arange(row_modes) + bi * row_modes, col_modes)
            c = np.tile(np.arange(col_modes) + bj * col_modes, row_modes)
            rows.append(r)
            cols.append(c)
            vals.append(sub.ravel())
        shape = (nr * row_modes, nc * col_modes)
        if rows:
            return sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=shape,
            ).tocsr()
        return sp.csr_matrix(shape)

    def max_abs(self) -> float:
        if not self.blocks:
            return 0.0
        return max(float(np.max(np.abs(b))) for b in self.blocks.values())


class DirectFactorization:
    """Stored sparse LU factorization, reusable across right-hand sides."""

    def __init__(self, matrix: BlockSparseMatrix):
        self.shape = matrix.shape
        if self.shape[0] != self.shape[1]:
            raise DimensionMismatchError("direct solver needs a square matrix")
        csc = matrix.tocsr().tocsc()
        try:
            with np.errstate(all="ignore"):
                self._lu = spla.splu(csc)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc
        self.factor_count = 1  # for reuse verification

    def apply(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape != (self.shape[0],):
            raise DimensionMismatchError(
                f"rhs of length {b.shape} against matrix {self.shape}"
            )
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("factorization produced non-finite values")
        return x


def bs_matvec(M: BlockSparseMatrix, x: np.ndarray) -> np.ndarray:
    return M.matvec(x)


def bs_matmat(A: BlockSparseMatrix, B: BlockSparseMatrix) -> BlockSparseMatrix:
    return A.matmat(B)


def direct_factor(M: BlockSparseMatrix) -> DirectFactorization:
    return DirectFactorization(M)


def direct_apply(F: DirectFactorization, b: np.ndarray) -> np.ndarray:
    return F.apply(b)


def write_matrix_market(path, M: BlockSparseMatrix, comment: str = "") -> None:
    from scipy.io import mmwrite

    mmwrite(str(path), M.tocsr(), comment=comment)


def read_matrix_market(path) -> sp.csr_matrix:
    from scipy.io import mmread

    return sp.csr_matrix(mmread(str(path)))
