"""Benchmark harness: single-case solves, grid/degree sweeps, and
matrix-operation micro-benchmarks for the jump-coefficient Poisson
problem on an embedded interface.

A case describes the full pipeline — background mesh, cut-cell geometry,
species spaces, small-cell agglomeration, aggregation hierarchy, system
assembly, and one solver run — and reports degree-of-freedom counts
(before and after agglomeration), the three setup/solve phase timings,
and the residual outcome.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field, replace
from time import perf_counter
from typing import Callable, Optional, Sequence

import numpy as np

from .agglomeration import small_cell_agglomeration_map
from .assembly import (
    PenaltyConfig,
    assemble_rhs,
    assemble_sip,
    dirichlet_problem,
    l2_error,
)
from .basis import ReferenceBasis
from .blockmatrix import direct_factor, write_matrix_market
from .cutcells import classify_and_build
from .errors import CutDgError, InvalidConfigError
from .levelset import make_level_set
from .mesh import build_cartesian
from .solvers import (
    SolverConfig,
    SolverReport,
    gmres_pmg_solve,
    ortho_mg_solve,
)
from .spaces import SpeciesOrthoBlocks, build_index_map
from .transfer import MultigridHierarchy, build_hierarchy, galerkin_restrict

SOLVER_IDS = ("direct", "omg", "gmres-pmg")

SWEEP_CSV_HEADER = (
    "grid,k,dofs,solver,iterations,converged,setup_basis_ms,"
    "setup_matmat_ms,solve_ms,final_residual,l2_error"
)

MATOPS_CSV_HEADER = "op,repetitions,median_ms,nonzero_rows"


def default_alpha(degree: int) -> float:
    """Agglomeration threshold by polynomial degree: 0.1 up to cubic,
    0.3 for the stiffer high-degree runs."""
    return 0.1 if degree <= 3 else 0.3


def default_k_lo(degree: int) -> int:
    """Separation degree by polynomial degree: 1 up to cubic, 3 above."""
    return 1 if degree <= 3 else 3


@dataclass(frozen=True)
class BenchCase:
    """One benchmark configuration.  Defaults reproduce the reference
    setup: unit-jump source on (-1,1)^3, zero Dirichlet data, diffusion
    1 inside the interface and 1000 outside, curved cubic interface,
    absolute residual tolerance 1e-10."""

    dim: int = 3
    cells: int = 4
    degree: int = 2
    mu_a: float = 1.0
    mu_b: float = 1000.0
    alpha: Optional[float] = None
    levelset: str = "paper-benchmark"
    levelset_params: dict = field(default_factory=dict)
    solver: str = "omg"
    tolerance: float = 1e-10
    k_lo: Optional[int] = None
    num_levels: int = 2
    max_iterations: int = 1000
    schwarz_target_dofs: int = 2000
    gmres_restart: int = 30
    rm_max_columns: int = 200
    coarse_cycle_iterations: int = 2
    quad_depth: int = 3
    gauss_order: Optional[int] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise InvalidConfigError("dim must be 2 or 3")
        if self.cells < 1:
            raise InvalidConfigError("cells must be >= 1")
        if self.degree < 0:
            raise InvalidConfigError("degree must be >= 0")
        if self.solver not in SOLVER_IDS:
            raise InvalidConfigError(
                f"unknown solver {self.solver!r}; choose from {SOLVER_IDS}"
            )
        if self.quad_depth < 0:
            raise InvalidConfigError("quad_depth must be >= 0")

    @property
    def resolved_alpha(self) -> float:
        return self.alpha if self.alpha is not None else default_alpha(self.degree)

    @property
    def resolved_k_lo(self) -> int:
        k_lo = self.k_lo if self.k_lo is not None else default_k_lo(self.degree)
        return min(k_lo, self.degree)

    @property
    def resolved_gauss_order(self) -> int:
        return (
            self.gauss_order
            if self.gauss_order is not None
            else self.degree + 2
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            k_lo=(self.resolved_k_lo,),
            schwarz_target_dofs=self.schwarz_target_dofs,
            gmres_restart=self.gmres_restart,
            num_levels=self.num_levels,
            rm_max_columns=self.rm_max_columns,
            coarse_cycle_iterations=self.coarse_cycle_iterations,
        )


@dataclass
class CaseResult:
    """Everything a case run produces besides the solution itself."""

    report: SolverReport
    dofs_raw: int
    dofs_agglomerated: int
    l2_error: Optional[float] = None

    @property
    def converged(self) -> bool:
        return self.report.converged


@dataclass
class _Assembled:
    cutmesh: object
    basis: ReferenceBasis
    indexmap: object
    orthoblocks: SpeciesOrthoBlocks
    matrix: object
    rhs: np.ndarray
    hierarchy: MultigridHierarchy
    phase_times: dict


def assemble_case(case: BenchCase) -> _Assembled:
    """Pipeline up to (and including) the solver-facing hierarchy:
    mesh, cut-cell geometry, species index map, agglomeration,
    assembly in the plain background basis, aggregation hierarchy."""
    ls = make_level_set(case.levelset, case.levelset_params)
    mesh = build_cartesian(
        [(-1.0, 1.0)] * case.dim, [case.cells] * case.dim
    )
    basis = ReferenceBasis(case.degree, case.dim)
    cutmesh = classify_and_build(
        mesh, ls, case.quad_depth, case.resolved_gauss_order
    )
    imap = build_index_map(cutmesh, case.degree)
    plain = SpeciesOrthoBlocks(basis=basis, factors={})
    problem = dirichlet_problem(
        case.mu_a, case.mu_b, lambda X: np.ones(len(X)), case.dim
    )
    agg = small_cell_agglomeration_map(cutmesh, case.resolved_alpha)
    penalty = PenaltyConfig()
    matrix = assemble_sip(cutmesh, imap, plain, problem, penalty, agg)
    rhs = assemble_rhs(cutmesh, imap, plain, problem, penalty, agg)
    phase_times: dict = {}
    hierarchy = build_hierarchy(
        cutmesh,
        basis,
        imap,
        matrix,
        rhs,
        case.resolved_alpha,
        case.num_levels,
        phase_times=phase_times,
    )
    return _Assembled(
        cutmesh=cutmesh,
        basis=basis,
        indexmap=imap,
        orthoblocks=plain,
        matrix=matrix,
        rhs=rhs,
        hierarchy=hierarchy,
        phase_times=phase_times,
    )


def solve_assembled(case: BenchCase, asm: _Assembled):
    """Run the case's solver on the first-level system.  Returns
    (solution on level 1, SolverReport with phase times filled in)."""
    hier = asm.hierarchy
    lv = hier.level(1)
    config = case.solver_config()
    config.check_degree(case.degree)
    if case.solver == "direct":
        t0 = perf_counter()
        x = direct_factor(lv.matrix).apply(lv.rhs)
        dt = perf_counter() - t0
        res = float(np.linalg.norm(lv.rhs - lv.matrix.matvec(x)))
        report = SolverReport(
            solver="direct",
            iterations=0,
            converged=True,
            final_residual=res,
            residual_history=[res],
            time_iterations=dt,
            dofs=lv.num_dofs,
        )
    elif case.solver == "omg":
        x, report = ortho_mg_solve(hier, lv.rhs, None, config, 1)
    else:  # gmres-pmg
        x, report = gmres_pmg_solve(lv.matrix, lv.rhs, config, dim=case.dim)
    report.time_basis_setup = asm.phase_times.get("basis", 0.0)
    report.time_matmat_setup = asm.phase_times.get("matmat", 0.0)
    return x, report


def run_case(
    case: BenchCase,
    exact: Optional[Callable[[np.ndarray, int], np.ndarray]] = None,
) -> CaseResult:
    """Build and solve one case.  ``exact`` is an optional species-aware
    evaluator (points, species) -> values; when given, the broken L2
    error of the solution is reported."""
    asm = assemble_case(case)
    x1, report = solve_assembled(case, asm)
    err = None
    if exact is not None:
        x_raw = asm.hierarchy.to_level1.matvec(x1)
        err = l2_error(
            x_raw, exact, asm.cutmesh, asm.indexmap, asm.orthoblocks
        )
    return CaseResult(
        report=report,
        dofs_raw=asm.indexmap.L,
        dofs_agglomerated=asm.hierarchy.level(1).num_dofs,
        l2_error=err,
    )


def _sweep_row(case: BenchCase, result: Optional[CaseResult], error: str = ""):
    grid = f"{case.cells}^{case.dim}"
    if result is None:
        return [
            grid, case.degree, "", case.solver, 0, False,
            "", "", "", "", error,
        ]
    rep = result.report
    return [
        grid,
        case.degree,
        result.dofs_raw,
        case.solver,
        rep.iterations,
        rep.converged,
        f"{rep.time_basis_setup * 1e3:.3f}",
        f"{rep.time_matmat_setup * 1e3:.3f}",
        f"{rep.time_iterations * 1e3:.3f}",
        f"{rep.final_residual:.6e}",
        "" if result.l2_error is None else f"{result.l2_error:.6e}",
    ]


def run_sweep(
    grids: Sequence[int],
    degrees: Sequence[int],
    solvers: Sequence[str],
    base_case: Optional[BenchCase] = None,
    out: Optional[str] = None,
) -> list:
    """One row per (grid, degree, solver).  A failing case is recorded
    in its row and the sweep continues.  Returns the rows; writes CSV to
    ``out`` when given."""
    if not grids or not degrees or not solvers:
        raise InvalidConfigError("sweep needs grids, degrees, and solvers")
    base = base_case or BenchCase()
    rows = []
    for n in grids:
        for k in degrees:
            assembled = None
            for solver in solvers:
                case = replace(
                    base, cells=int(n), degree=int(k), solver=solver
                )
                try:
                    if assembled is None:
                        assembled = assemble_case(case)
                    x1, report = solve_assembled(case, assembled)
                    result = CaseResult(
                        report=report,
                        dofs_raw=assembled.indexmap.L,
                        dofs_agglomerated=assembled.hierarchy.level(1).num_dofs,
                    )
                    rows.append(_sweep_row(case, result))
                except CutDgError as exc:
                    rows.append(_sweep_row(case, None, error=str(exc)))
    if out:
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_CSV_HEADER.split(","))
            writer.writerows(rows)
    return rows


def micro_bench_matops(case: BenchCase, repetitions: int = 20) -> list:
    """Median wall time of a matrix-vector product (over ``repetitions``
    runs) and of the aggregation triple product, on the case's assembled
    system.  No pass/fail thresholds: timings are hardware-specific."""
    if repetitions < 1:
        raise InvalidConfigError("repetitions must be >= 1")
    asm = assemble_case(case)
    M = asm.matrix
    nonzero_rows = int(np.count_nonzero(np.diff(M.tocsr().indptr)))
    v = np.ones(M.shape[1])
    M.matvec(v)  # warm-up: the first product builds the compressed form
    times = []
    for _ in range(repetitions):
        t0 = perf_counter()
        M.matvec(v)
        times.append(perf_counter() - t0)
    matvec_ms = statistics.median(times) * 1e3

    R = asm.hierarchy.to_level1
    t0 = perf_counter()
    galerkin_restrict(M, None, R)
    matmat_ms = (perf_counter() - t0) * 1e3

    return [
        ["matvec", repetitions, f"{matvec_ms:.6f}", nonzero_rows],
        ["matmat", 1, f"{matmat_ms:.6f}", nonzero_rows],
    ]


def write_matops_csv(rows: list, out: str) -> None:
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MATOPS_CSV_HEADER.split(","))
        writer.writerows(rows)


def export_case_matrix(case: BenchCase, path: str) -> int:
    """Assemble the case and write its first-level system matrix in
    MatrixMarket coordinate format.  Returns the matrix dimension."""
    asm = assemble_case(case)
    lv = asm.hierarchy.level(1)
    write_matrix_market(path, lv.matrix)
    return lv.num_dofs


def format_rows(header: str, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header.split(","))
    writer.writerows(rows)
    return buf.getvalue()
