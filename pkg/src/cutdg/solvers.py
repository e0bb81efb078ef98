"""Iterative solvers for the block systems produced by the hierarchy.

Four cooperating pieces:

* a degree-separated block preconditioner (``pmg_apply``): one global
  direct solve on the low-degree modes of a chosen cell set, followed by
  independent dense solves of each cell's high-degree diagonal block on
  the post-correction residual;
* an additive overlapping-block smoother (``schwarz_partition`` /
  ``schwarz_apply``) that applies the preconditioner per block and
  divides overlap regions by their membership count;
* residual minimization over an incrementally orthonormalized search
  space (``RmState`` / ``rm_step``), which turns any sequence of
  correction candidates into a non-increasing residual sequence;
* two outer solvers: a multigrid cycle that feeds smoother and
  coarse-grid corrections through residual minimization
  (``ortho_mg_solve``), and restarted GMRES with the block
  preconditioner applied on the right (``gmres_pmg_solve``).

All solvers treat a "cell" as one block row of the matrix layout: on
hierarchy levels those are aggregates, each carrying a degree-graded
orthonormal basis, so the leading modes of every block span the
low-degree polynomial subspace that the preconditioner separates out.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from time import perf_counter
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .basis import space_dimension
from .blockmatrix import (
    BlockSparseMatrix,
    DirectFactorization,
    direct_factor,
    uniform_layout,
)
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    LayoutMismatchError,
    SingularSystemError,
)
from .mesh import MeshGraph

DEPENDENT_CANDIDATE_RTOL = 1e-13
DEFAULT_RM_MAX_COLUMNS = 200


# ---------------------------------------------------------------------------
# configuration and reporting


@dataclass(frozen=True)
class SolverConfig:
    """Shared knobs of the iterative solvers.

    ``k_lo`` is the degree-separation vector (one entry per unknown
    field; this scalar problem has one): modes of total degree <= k_lo
    form the globally coupled part of the preconditioner.
    """

    tolerance: float = 1e-10
    max_iterations: int = 1000
    k_lo: tuple = (1,)
    schwarz_target_dofs: int = 2000
    gmres_restart: int = 30
    num_levels: int = 2
    rm_max_columns: int = DEFAULT_RM_MAX_COLUMNS
    coarse_cycle_iterations: int = 2

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvalidConfigError("tolerance must be positive")
        if self.max_iterations < 0:
            raise InvalidConfigError("max_iterations must be >= 0")
        klo = self.k_lo if isinstance(self.k_lo, tuple) else (
            tuple(self.k_lo) if isinstance(self.k_lo, (list, np.ndarray))
            else (self.k_lo,)
        )
        object.__setattr__(self, "k_lo", klo)
        if any(int(k) < 0 for k in klo):
            raise InvalidConfigError("k_lo entries must be >= 0")
        if self.gmres_restart < 1:
            raise InvalidConfigError("gmres_restart must be >= 1")
        if self.num_levels < 1:
            raise InvalidConfigError("num_levels must be >= 1")
        if self.rm_max_columns < 1:
            raise InvalidConfigError("rm_max_columns must be >= 1")
        if self.coarse_cycle_iterations < 1:
            raise InvalidConfigError("coarse_cycle_iterations must be >= 1")

    @property
    def k_lo_scalar(self) -> int:
        return int(self.k_lo[0])

    def check_degree(self, k: int) -> None:
        if any(int(kl) > k for kl in self.k_lo):
            raise InvalidConfigError(
                f"k_lo {self.k_lo} exceeds the space degree {k}"
            )


REPORT_CSV_HEADER = (
    "solver,dofs,iterations,converged,setup_basis_ms,"
    "setup_matmat_ms,solve_ms,final_residual"
)


@dataclass
class SolverReport:
    """Outcome of one solve: iteration count, residual trace, and the
    wall time of the three phases (basis setup, matrix-matrix
    restriction products, iterations)."""

    solver: str
    iterations: int
    converged: bool
    final_residual: float
    residual_history: list
    time_basis_setup: float = 0.0
    time_matmat_setup: float = 0.0
    time_iterations: float = 0.0
    dofs: int = 0

    def csv_row(self) -> str:
        return (
            f"{self.solver},{self.dofs},{self.iterations},"
            f"{str(self.converged).lower()},"
            f"{1e3 * self.time_basis_setup:.3f},"
            f"{1e3 * self.time_matmat_setup:.3f},"
            f"{1e3 * self.time_iterations:.3f},"
            f"{self.final_residual:.6e}"
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(REPORT_CSV_HEADER + "\n")
            f.write(self.csv_row() + "\n")

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residual_history):
                writer.writerow([i, f"{r:.16e}"])


# ---------------------------------------------------------------------------
# degree-separated block preconditioner


def _normalize_k_lo(k_lo) -> int:
    if isinstance(k_lo, (int, np.integer)):
        val = int(k_lo)
    else:
        seq = tuple(k_lo)
        if len(seq) != 1:
            raise InvalidConfigError(
                "one separation degree expected for a scalar unknown"
            )
        val = int(seq[0])
    if val < 0:
        raise InvalidConfigError("separation degree must be >= 0")
    return val


def _uniform_block_size(M: BlockSparseMatrix) -> int:
    sizes = set(M.row_layout.sizes) | set(M.col_layout.sizes)
    if len(sizes) != 1:
        raise LayoutMismatchError(
            "degree-separated preconditioning needs a uniform block layout"
        )
    return sizes.pop()


class _PmgFactors:
    """Cached factorizations for one (cell set, separation degree) pair.

    Application is local to the cell set: the input is gathered onto the
    extracted submatrix, both correction stages run there, and the
    result is scattered back, so the cost scales with the block, not the
    full system."""

    def __init__(
        self,
        M: BlockSparseMatrix,
        cells: tuple,
        modes_low: int,
        block_size: int,
    ):
        offsets = M.row_layout.offsets
        self.cells = cells
        self.modes_low = modes_low
        self.global_indices = np.concatenate(
            [offsets[c] + np.arange(block_size) for c in cells]
        ) if cells else np.zeros(0, dtype=int)
        self.low_local = np.concatenate(
            [i * block_size + np.arange(modes_low) for i in range(len(cells))]
        ) if cells else np.zeros(0, dtype=int)

        sub = M.extract_block_submatrix(cells, cells)
        self.submatrix = sub
        low = BlockSparseMatrix(
            uniform_layout(len(cells), modes_low),
            uniform_layout(len(cells), modes_low),
        )
        for (bi, bj), block in sub.blocks.items():
            low.add_block(bi, bj, block[:modes_low, :modes_low])
        try:
            self.low_factorization = direct_factor(low)
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"low-order system on cells {cells[:8]}... is singular"
            ) from exc

        self.high_local = {}
        self.high_factors = {}
        if modes_low < block_size:
            for i, c in enumerate(cells):
                diag = M.get_block(c, c)
                if diag is None:
                    raise SingularSystemError(
                        f"cell {c} has no diagonal block"
                    )
                H = np.array(diag[modes_low:, modes_low:])
                lu, piv = sla.lu_factor(H, check_finite=False)
                if not np.all(np.isfinite(lu)) or np.any(
                    np.abs(np.diag(lu)) == 0.0
                ):
                    raise SingularSystemError(
                        f"high-order block of cell {c} is singular"
                    )
                self.high_local[c] = i * block_size + np.arange(
                    modes_low, block_size
                )
                self.high_factors[c] = (lu, piv)

    def apply(self, M: BlockSparseMatrix, b: np.ndarray) -> np.ndarray:
        b_loc = b[self.global_indices]
        x_loc = np.zeros_like(b_loc)
        try:
            x_loc[self.low_local] = self.low_factorization.apply(
                b_loc[self.low_local]
            )
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"low-order solve failed: {exc}"
            ) from exc
        if self.high_factors:
            r_loc = b_loc - self.submatrix.matvec(x_loc)
            for c in self.cells:
                idx = self.high_local[c]
                x_loc[idx] += sla.lu_solve(
                    self.high_factors[c], r_loc[idx], check_finite=False
                )
        x = np.zeros_like(b)
        x[self.global_indices] = x_loc
        return x


def pmg_apply(
    M: BlockSparseMatrix,
    b: np.ndarray,
    k_lo,
    cells: Sequence[int],
    factorization_cache: dict,
    *,
    dim: int,
) -> np.ndarray:
    """One application of the degree-separated preconditioner on the
    block rows ``cells``: solve the coupled system of their modes of
    total degree <= ``k_lo``, then solve each cell's high-degree
    diagonal block against the residual left by the low-degree sweep.

    The output vector is supported on the blocks in ``cells`` only.
    Factorizations are cached in ``factorization_cache`` keyed by
    (cells, k_lo) and reused across calls.
    """
    klo = _normalize_k_lo(k_lo)
    block_size = _uniform_block_size(M)
    modes_low = min(space_dimension(klo, dim), block_size)
    cells = tuple(sorted(set(int(c) for c in cells)))
    if not cells:
        raise InvalidConfigError("empty cell set")
    if cells[0] < 0 or cells[-1] >= M.row_layout.num_blocks:
        raise DimensionMismatchError("cell index out of range")
    b = np.asarray(b, dtype=float)
    if b.shape != (M.shape[0],):
        raise DimensionMismatchError(
            f"rhs of length {b.shape} against matrix {M.shape}"
        )

    key = (cells, modes_low)
    factors = factorization_cache.get(key)
    if factors is None:
        factors = _PmgFactors(M, cells, modes_low, block_size)
        factorization_cache[key] = factors
    return factors.apply(M, b)


# ---------------------------------------------------------------------------
# additive overlapping-block smoother


@dataclass
class SchwarzPartition:
    """Cover of the matrix blocks: a disjoint core partition, its
    one-neighbor-layer extensions, and the per-DOF damping that counts
    how many extended blocks contain each DOF."""

    cores: tuple
    blocks: tuple
    block_rows: tuple
    damping: np.ndarray
    dim: int
    cache: dict = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


def _node_accessors(indexmap):
    """(num_nodes, dofs_of, dof_indices_of, matrix_blocks_of, dim) for a
    raw species-block index map or an aggregation level."""
    if hasattr(indexmap, "block_of"):  # raw XdgIndexMap
        imap = indexmap
        num_nodes = imap.cutmesh.mesh.num_cells
        dim = imap.cutmesh.mesh.dim

        cell_blocks = {}
        for b, (cell, _s) in enumerate(imap.blocks):
            cell_blocks.setdefault(cell, []).append(b)

        def matrix_blocks_of(j):
            return tuple(cell_blocks.get(j, ()))

        def dofs_of(j):
            return sum(
                imap.block_slice(b).stop - imap.block_slice(b).start
                for b in cell_blocks.get(j, ())
            )

        def dof_indices_of(j):
            parts = [
                np.arange(imap.block_slice(b).start, imap.block_slice(b).stop)
                for b in cell_blocks.get(j, ())
            ]
            return (
                np.concatenate(parts) if parts else np.zeros(0, dtype=int)
            )

        total = imap.L
    elif hasattr(indexmap, "aggregates"):  # aggregation LevelData
        level = indexmap
        num_nodes = level.num_blocks
        size = level.block_size
        dim = level.basis.dim

        def matrix_blocks_of(g):
            return (g,)

        def dofs_of(g):
            return size

        def dof_indices_of(g):
            return np.arange(g * size, (g + 1) * size)

        total = level.num_dofs
    else:
        raise InvalidConfigError(
            "index structure must be a species index map or a level"
        )
    return num_nodes, dofs_of, dof_indices_of, matrix_blocks_of, dim, total


def schwarz_partition(
    mesh_graph: MeshGraph, indexmap, target_dofs: int
) -> SchwarzPartition:
    """Greedy breadth-first partition of the cell graph into blocks of
    roughly ``target_dofs`` degrees of freedom, each then extended by
    one layer of face neighbors; overlap DOFs get damping equal to the
    number of extended blocks containing them."""
    (
        num_nodes,
        dofs_of,
        dof_indices_of,
        matrix_blocks_of,
        dim,
        total_dofs,
    ) = _node_accessors(indexmap)
    if mesh_graph.num_cells != num_nodes:
        raise DimensionMismatchError(
            "graph and index structure disagree on the cell count"
        )
    max_cell = max(dofs_of(j) for j in range(num_nodes))
    if target_dofs < max_cell:
        raise InvalidConfigError(
            f"target {target_dofs} below the largest cell ({max_cell} DOFs)"
        )

    adjacency = [sorted(nbs) for nbs in mesh_graph.adjacency]
    assigned = np.zeros(num_nodes, dtype=bool)
    cores = []
    while not assigned.all():
        seed = int(np.flatnonzero(~assigned)[0])
        block = []
        dofs = 0
        queue = deque([seed])
        queued = {seed}
        while queue and dofs < target_dofs:
            c = queue.popleft()
            if assigned[c]:
                continue
            assigned[c] = True
            block.append(c)
            dofs += dofs_of(c)
            for nb in adjacency[c]:
                if not assigned[nb] and nb not in queued:
                    queue.append(nb)
                    queued.add(nb)
        cores.append(tuple(sorted(block)))

    extended = []
    for core in cores:
        ext = set(core)
        for c in core:
            ext.update(adjacency[c])
        extended.append(tuple(sorted(ext)))

    damping = np.zeros(total_dofs)
    for ext in extended:
        for c in ext:
            damping[dof_indices_of(c)] += 1.0
    if np.any(damping < 1.0):
        raise InvalidConfigError("partition left degrees of freedom uncovered")

    block_rows = tuple(
        tuple(
            sorted(b for c in ext for b in matrix_blocks_of(c))
        )
        for ext in extended
    )
    return SchwarzPartition(
        cores=tuple(cores),
        blocks=tuple(extended),
        block_rows=block_rows,
        damping=damping,
        dim=dim,
    )


def schwarz_apply(
    M: BlockSparseMatrix, residual: np.ndarray, partition: SchwarzPartition,
    k_lo,
) -> np.ndarray:
    """Additive sum of per-block preconditioner applications to the
    input residual, divided componentwise by the overlap damping."""
    residual = np.asarray(residual, dtype=float)
    if residual.shape != (M.shape[0],):
        raise DimensionMismatchError(
            f"residual of length {residual.shape} against matrix {M.shape}"
        )
    if len(partition.damping) != M.shape[0]:
        raise DimensionMismatchError("partition built for another layout")
    z = np.zeros_like(residual)
    for rows in partition.block_rows:
        z += pmg_apply(
            M, residual, k_lo, rows, partition.cache, dim=partition.dim
        )
    return z / partition.damping


# ---------------------------------------------------------------------------
# residual minimization


class RmState:
    """Growing orthonormal search space for residual minimization.

    Columns of W are orthonormal images M z of the accepted candidates
    z (stored in Z, transformed identically), so the best correction in
    their span is x0 + Z alpha with alpha = W^T r0, leaving the
    residual r0 - W alpha orthogonal to the span of W.

    The residual handed back to callers is not the orthogonal-projection
    update but the true residual of the current point, maintained through
    exact images of the accepted columns (one extra operator application
    per accepted candidate).  Normalizing a nearly dependent candidate
    amplifies the rounding gap between a stored column w and the exact
    image M z by 1/norm_w, so the projection update alone can drift
    arbitrarily far from the truth on ill-conditioned systems; keeping
    exact images makes the non-increase guarantee hold for the residual
    that is actually reported.
    """

    def __init__(
        self, x0: np.ndarray, r0: np.ndarray,
        max_columns: int = DEFAULT_RM_MAX_COLUMNS,
    ):
        x0 = np.asarray(x0, dtype=float)
        r0 = np.asarray(r0, dtype=float)
        if x0.shape != r0.shape:
            raise DimensionMismatchError("x0 and r0 lengths differ")
        if max_columns < 1:
            raise InvalidConfigError("max_columns must be >= 1")
        n = len(x0)
        self.x0 = x0.copy()
        self.r0 = r0.copy()
        self.max_columns = max_columns
        self._W = np.zeros((n, max_columns))
        self._Z = np.zeros((n, max_columns))
        self._alpha = np.zeros(max_columns)
        # Accumulated correction y = Z @ alpha and its exact image M y,
        # so r0 - _My is the true residual of x0 + _y.
        self._y = np.zeros(n)
        self._My = np.zeros(n)
        self.best_norm = float(np.linalg.norm(r0))
        self.ncols = 0
        self.last_dependent = False
        self.dependent_count = 0
        self.rejected_count = 0
        self.restart_count = 0

    @property
    def W(self) -> np.ndarray:
        return self._W[:, : self.ncols]

    @property
    def Z(self) -> np.ndarray:
        return self._Z[:, : self.ncols]

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha[: self.ncols]

    def current(self) -> tuple:
        """Best point over the accumulated space and its true residual."""
        return self.x0 + self._y, self.r0 - self._My

    def restart(self) -> None:
        """Collapse the space: current point becomes the new base."""
        self.x0 = self.x0 + self._y
        self.r0 = self.r0 - self._My
        self._y = np.zeros_like(self._y)
        self._My = np.zeros_like(self._My)
        self.best_norm = float(np.linalg.norm(self.r0))
        self.ncols = 0
        self.restart_count += 1


def rm_step(state: RmState, z_candidate: np.ndarray, M) -> tuple:
    """Extend the search space by one candidate and return the new best
    point, its true residual, and the state.

    The candidate's image w = M z is orthonormalized against W (the
    same combination applied to z), both are appended, and the new
    coefficient is w . r0.  A candidate whose orthogonalized image
    nearly vanishes (relative to ||M z||) adds no new direction: it is
    skipped, the state is left unchanged, and ``state.last_dependent``
    is set.  The step is accepted only if the true residual of the
    updated point (tracked through an exact image of the normalized
    candidate) is not greater than the current one; otherwise the
    column is dropped and the space collapses onto the current point,
    so the returned residual norm never increases.
    """
    if state.ncols >= state.max_columns:
        state.restart()

    z = np.asarray(z_candidate, dtype=float).copy()
    if z.shape != state.x0.shape:
        raise DimensionMismatchError("candidate length mismatch")

    def image(v: np.ndarray) -> np.ndarray:
        return M.matvec(v) if hasattr(M, "matvec") else np.asarray(
            M @ v, float
        )

    w = image(z)
    scale = float(np.linalg.norm(w))

    for _ in range(2):  # two orthogonalization passes keep W^T W = I tight
        coeff = state.W.T @ w
        w -= state.W @ coeff
        z -= state.Z @ coeff

    norm_w = float(np.linalg.norm(w))
    if scale == 0.0 or norm_w <= DEPENDENT_CANDIDATE_RTOL * scale:
        state.last_dependent = True
        state.dependent_count += 1
        x, r = state.current()
        return x, r, state

    w /= norm_w
    z /= norm_w
    col = state.ncols
    alpha = float(w @ state.r0)
    y_new = state._y + alpha * z
    My_new = state._My + alpha * image(z)
    rho = float(np.linalg.norm(state.r0 - My_new))
    state.last_dependent = False
    if rho > state.best_norm:
        # Rounding in the normalized pair made the true residual grow:
        # discard the candidate and rebase on the current point.
        state.rejected_count += 1
        state.restart()
        x, r = state.current()
        return x, r, state

    state._W[:, col] = w
    state._Z[:, col] = z
    state._alpha[col] = alpha
    state._y = y_new
    state._My = My_new
    state.best_norm = rho
    state.ncols = col + 1
    x, r = state.current()
    return x, r, state


# ---------------------------------------------------------------------------
# multigrid over the aggregation hierarchy


class _OmgContext:
    """Per-solve caches: Schwarz partitions, restriction transposes, and
    the coarsest-level factorization, shared across outer iterations."""

    def __init__(self, config: SolverConfig, entry_level: int = 1):
        self.config = config
        self.entry_level = entry_level
        self.partitions = {}
        self.transposes = {}
        self.coarse_factorization = {}

    def partition(self, hierarchy, level: int) -> SchwarzPartition:
        part = self.partitions.get(level)
        if part is None:
            lv = hierarchy.level(level)
            target = max(
                self.config.schwarz_target_dofs, lv.data.block_size
            )
            part = schwarz_partition(lv.graph, lv.data, target)
            self.partitions[level] = part
        return part

    def restriction_transpose(self, hierarchy, level: int):
        Rt = self.transposes.get(level)
        if Rt is None:
            Rt = hierarchy.level(level).restriction.transpose()
            self.transposes[level] = Rt
        return Rt

    def coarse_solver(self, hierarchy, level: int) -> DirectFactorization:
        fact = self.coarse_factorization.get(level)
        if fact is None:
            fact = direct_factor(hierarchy.level(level).matrix)
            self.coarse_factorization[level] = fact
        return fact


def ortho_mg_solve(
    hierarchy,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    config: Optional[SolverConfig] = None,
    level: int = 1,
    _context: Optional[_OmgContext] = None,
) -> tuple:
    """Multigrid solve on the given hierarchy level: each iteration
    feeds a smoother candidate, a coarse-grid correction (a recursive
    cycle on the next level, direct at the coarsest), and another
    smoother candidate through residual minimization, so the residual
    history is non-increasing.  Intermediate levels run
    ``coarse_cycle_iterations`` of the same loop per visit; the coarsest
    level is always solved directly.  Returns (solution, report);
    running out of iterations yields a non-converged report, not an
    exception."""
    config = config or SolverConfig()
    ctx = _context or _OmgContext(config, entry_level=level)
    lv = hierarchy.level(level)
    M = lv.matrix
    b = np.asarray(b, dtype=float)
    if b.shape != (M.shape[0],):
        raise DimensionMismatchError(
            f"rhs of length {b.shape} against matrix {M.shape}"
        )
    config.check_degree(lv.data.basis.degree)
    t_start = perf_counter()

    if level == hierarchy.num_levels or lv.restriction is None:
        x = ctx.coarse_solver(hierarchy, level).apply(b)
        res = float(np.linalg.norm(b - M.matvec(x)))
        report = SolverReport(
            solver="omg",
            iterations=0,
            converged=res <= config.tolerance,
            final_residual=res,
            residual_history=[res],
            time_iterations=perf_counter() - t_start,
            dofs=M.shape[0],
        )
        return x, report

    x = np.zeros_like(b) if x0 is None else np.asarray(x0, float).copy()
    r = b - M.matvec(x)
    state = RmState(x, r, config.rm_max_columns)
    history = [float(np.linalg.norm(r))]
    partition = ctx.partition(hierarchy, level)
    k_lo = config.k_lo_scalar

    budget = (
        config.max_iterations
        if level == ctx.entry_level
        else config.coarse_cycle_iterations
    )
    iterations = 0
    while history[-1] > config.tolerance and iterations < budget:
        iterations += 1
        z = schwarz_apply(M, r, partition, k_lo)
        x, r, _ = rm_step(state, z, M)

        coarse_r = ctx.restriction_transpose(hierarchy, level).matvec(r)
        coarse_x, _ = ortho_mg_solve(
            hierarchy, coarse_r, None, config, level + 1, ctx
        )
        x, r, _ = rm_step(state, lv.restriction.matvec(coarse_x), M)

        z = schwarz_apply(M, r, partition, k_lo)
        x, r, _ = rm_step(state, z, M)
        history.append(float(np.linalg.norm(r)))

    report = SolverReport(
        solver="omg",
        iterations=iterations,
        converged=history[-1] <= config.tolerance,
        final_residual=history[-1],
        residual_history=history,
        time_iterations=perf_counter() - t_start,
        dofs=M.shape[0],
    )
    return x, report


# ---------------------------------------------------------------------------
# preconditioned GMRES


def gmres_pmg_solve(
    M: BlockSparseMatrix,
    b: np.ndarray,
    config: Optional[SolverConfig] = None,
    factorization_cache: Optional[dict] = None,
    *,
    dim: int,
    x0: Optional[np.ndarray] = None,
) -> tuple:
    """Restarted GMRES with the degree-separated block preconditioner
    applied on the right; terminates on the true residual 2-norm.
    Returns (solution, report)."""
    config = config or SolverConfig()
    cache = factorization_cache if factorization_cache is not None else {}
    b = np.asarray(b, dtype=float)
    if b.shape != (M.shape[0],):
        raise DimensionMismatchError(
            f"rhs of length {b.shape} against matrix {M.shape}"
        )
    all_cells = tuple(range(M.row_layout.num_blocks))
    k_lo = config.k_lo_scalar
    restart = config.gmres_restart
    t_start = perf_counter()

    x = np.zeros_like(b) if x0 is None else np.asarray(x0, float).copy()
    r = b - M.matvec(x)
    beta = float(np.linalg.norm(r))
    history = [beta]
    total = 0

    while beta > config.tolerance and total < config.max_iterations:
        n = len(b)
        V = np.zeros((n, restart + 1))
        Z = np.zeros((n, restart))
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        g[0] = beta
        V[:, 0] = r / beta

        j = 0
        while j < restart and total < config.max_iterations:
            total += 1
            Z[:, j] = pmg_apply(M, V[:, j], k_lo, all_cells, cache, dim=dim)
            w = M.matvec(Z[:, j])
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = float(V[:, i] @ w)
                w -= H[i, j] * V[:, i]
            H[j + 1, j] = float(np.linalg.norm(w))
            if H[j + 1, j] > 0.0 and j + 1 < restart + 1:
                V[:, j + 1] = w / H[j + 1, j]

            for i in range(j):  # apply stored rotations to the new column
                hij = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = hij
            denom = float(np.hypot(H[j, j], H[j + 1, j]))
            if denom == 0.0:
                raise SingularSystemError(
                    "preconditioned operator produced a zero column"
                )
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            H[j + 1, j] = 0.0

            estimate = abs(float(g[j + 1]))
            history.append(estimate)
            j += 1
            if estimate <= config.tolerance:
                break

        y = sla.solve_triangular(H[:j, :j], g[:j], check_finite=False)
        x = x + Z[:, :j] @ y
        r = b - M.matvec(x)
        beta = float(np.linalg.norm(r))
        history[-1] = beta  # replace the estimate with the true residual

    report = SolverReport(
        solver="gmres-pmg",
        iterations=total,
        converged=beta <= config.tolerance,
        final_residual=beta,
        residual_history=history,
        time_iterations=perf_counter() - t_start,
        dofs=M.shape[0],
    )
    return x, report
