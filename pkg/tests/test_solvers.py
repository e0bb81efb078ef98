import csv
import warnings
from functools import lru_cache

import numpy as np
import pytest

from cutdg.agglomeration import small_cell_agglomeration_map
from cutdg.assembly import (
    PenaltyConfig,
    assemble_rhs,
    assemble_sip,
    dirichlet_problem,
)
from cutdg.basis import ReferenceBasis
from cutdg.blockmatrix import BlockSparseMatrix, uniform_layout
from cutdg.cutcells import classify_and_build
from cutdg.errors import (
    DimensionMismatchError,
    InvalidConfigError,
    SingularSystemError,
)
from cutdg.levelset import benchmark_surface, plane
from cutdg.mesh import build_cartesian, mesh_graph
from cutdg.solvers import (
    REPORT_CSV_HEADER,
    RmState,
    SolverConfig,
    SolverReport,
    gmres_pmg_solve,
    ortho_mg_solve,
    pmg_apply,
    rm_step,
    schwarz_apply,
    schwarz_partition,
)
from cutdg.spaces import SpeciesOrthoBlocks, build_index_map
from cutdg.transfer import build_hierarchy

RNG_SEED = 20240817


# ---------------------------------------------------------------------------
# shared builders


def random_block_spd(num_blocks, block_size, seed=RNG_SEED, block_diagonal=False):
    """Uniform-block SPD matrix with dense blocks."""
    rng = np.random.default_rng(seed)
    n = num_blocks * block_size
    if block_diagonal:
        A = np.zeros((n, n))
        for c in range(num_blocks):
            Q = rng.normal(size=(block_size, block_size))
            sl = slice(c * block_size, (c + 1) * block_size)
            A[sl, sl] = Q @ Q.T + block_size * np.eye(block_size)
    else:
        Q = rng.normal(size=(n, n))
        A = Q @ Q.T + n * np.eye(n)
    M = BlockSparseMatrix(
        uniform_layout(num_blocks, block_size),
        uniform_layout(num_blocks, block_size),
    )
    for i in range(num_blocks):
        for j in range(num_blocks):
            blk = A[
                i * block_size : (i + 1) * block_size,
                j * block_size : (j + 1) * block_size,
            ]
            if np.any(blk != 0.0):
                M.add_block(i, j, blk)
    return M, A


def block_identity(num_blocks, size):
    M = BlockSparseMatrix(
        uniform_layout(num_blocks, size), uniform_layout(num_blocks, size)
    )
    for i in range(num_blocks):
        M.add_block(i, i, np.eye(size))
    return M


@lru_cache(maxsize=None)
def benchmark_system(cells=4, degree=2, num_levels=2):
    """Jump-coefficient system on the curved-interface box benchmark,
    reduced to the first aggregation level where the solvers operate."""
    mesh = build_cartesian([(-1.0, 1.0)] * 3, [cells] * 3)
    basis = ReferenceBasis(degree, 3)
    cm = classify_and_build(mesh, benchmark_surface(), 3, degree + 2)
    agg = small_cell_agglomeration_map(cm, 0.1)
    imap = build_index_map(cm, degree)
    plain = SpeciesOrthoBlocks(basis=basis, factors={})
    prob = dirichlet_problem(1.0, 1000.0, lambda X: np.ones(len(X)), 3)
    M = assemble_sip(cm, imap, plain, prob, PenaltyConfig(), agg)
    b = assemble_rhs(cm, imap, plain, prob, PenaltyConfig(), agg)
    hier = build_hierarchy(cm, basis, imap, M, b, 0.1, num_levels)
    return hier


@lru_cache(maxsize=None)
def benchmark_direct(cells=4, degree=2, num_levels=2):
    from scipy.sparse.linalg import spsolve

    hier = benchmark_system(cells, degree, num_levels)
    lv = hier.level(1)
    return spsolve(lv.matrix.tocsr().tocsc(), lv.rhs)


@lru_cache(maxsize=None)
def single_phase_2d():
    """8x8 single-species mesh, degree 1 (3 modes per cell, 192 DOFs)."""
    mesh = build_cartesian([(0.0, 1.0)] * 2, [8, 8])
    cm = classify_and_build(mesh, plane((1.0, 0.0), 10.0), 0, 3)
    imap = build_index_map(cm, 1)
    return mesh, cm, imap


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_and_normalization():
    cfg = SolverConfig()
    assert cfg.tolerance == 1e-10
    assert cfg.k_lo == (1,)
    assert cfg.schwarz_target_dofs == 2000
    assert cfg.gmres_restart == 30
    scalar = SolverConfig(k_lo=2)
    assert scalar.k_lo == (2,)
    assert scalar.k_lo_scalar == 2
    listed = SolverConfig(k_lo=[1])
    assert listed.k_lo == (1,)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"tolerance": 0.0},
        {"tolerance": -1.0},
        {"max_iterations": -1},
        {"k_lo": -1},
        {"gmres_restart": 0},
        {"num_levels": 0},
        {"rm_max_columns": 0},
        {"coarse_cycle_iterations": 0},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(InvalidConfigError):
        SolverConfig(**kwargs)


def test_config_degree_check():
    cfg = SolverConfig(k_lo=3)
    with pytest.raises(InvalidConfigError):
        cfg.check_degree(2)
    cfg.check_degree(3)


def test_report_csv_round_trip(tmp_path):
    rep = SolverReport(
        solver="omg",
        iterations=7,
        converged=True,
        final_residual=3.5e-11,
        residual_history=[1.0, 0.5, 3.5e-11],
        time_basis_setup=0.001,
        time_matmat_setup=0.002,
        time_iterations=0.003,
        dofs=42,
    )
    path = tmp_path / "report.csv"
    rep.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert ",".join(rows[0]) == REPORT_CSV_HEADER
    assert rows[1][0] == "omg"
    assert int(rows[1][2]) == 7

    hist = tmp_path / "history.csv"
    rep.write_history_csv(hist)
    with open(hist, newline="") as fh:
        hrows = list(csv.reader(fh))
    assert hrows[0] == ["iteration", "residual"]
    assert len(hrows) == 1 + len(rep.residual_history)
    assert float(hrows[-1][1]) == pytest.approx(3.5e-11)


# ---------------------------------------------------------------------------
# degree-separated block preconditioner


def test_pmg_full_separation_is_exact():
    # k_lo equal to the space degree: the whole system is the coupled
    # low-degree part, one application is a direct solve.
    M, A = random_block_spd(5, 3)
    rng = np.random.default_rng(1)
    b = rng.normal(size=A.shape[0])
    x = pmg_apply(M, b, 1, range(5), {}, dim=2)
    assert np.linalg.norm(b - A @ x) <= 1e-12 * np.linalg.norm(b)


def test_pmg_exact_on_decoupled_block_diagonal():
    # Three decoupled cells whose low and high modes do not interact:
    # the low sweep and the per-cell high solves are independently exact.
    rng = np.random.default_rng(3)
    size = 3  # mode 0 is the single degree-0 mode in 2D
    blocks = []
    for _ in range(3):
        B = np.zeros((size, size))
        B[0, 0] = 1.0 + rng.random()
        H = rng.normal(size=(2, 2))
        B[1:, 1:] = H @ H.T + 2.0 * np.eye(2)
        blocks.append(B)
    M = BlockSparseMatrix(uniform_layout(3, size), uniform_layout(3, size))
    A = np.zeros((9, 9))
    for c, B in enumerate(blocks):
        M.add_block(c, c, B)
        A[c * size : (c + 1) * size, c * size : (c + 1) * size] = B
    b = rng.normal(size=9)
    x = pmg_apply(M, b, 0, range(3), {}, dim=2)
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-12)


def test_pmg_factorization_cache_reused():
    M, A = random_block_spd(4, 3)
    rng = np.random.default_rng(5)
    cache = {}
    pmg_apply(M, rng.normal(size=12), 0, range(4), cache, dim=2)
    assert len(cache) == 1
    stored = next(iter(cache.values()))
    pmg_apply(M, rng.normal(size=12), 0, range(4), cache, dim=2)
    assert len(cache) == 1
    assert next(iter(cache.values())) is stored


def test_pmg_partial_cell_set_supported_only_there():
    M, A = random_block_spd(4, 3, block_diagonal=True)
    rng = np.random.default_rng(7)
    b = rng.normal(size=12)
    x = pmg_apply(M, b, 0, (1, 2), {}, dim=2)
    assert np.all(x[:3] == 0.0)
    assert np.all(x[9:] == 0.0)
    assert np.any(x[3:9] != 0.0)


def test_pmg_rejects_bad_cell_sets():
    M, _ = random_block_spd(3, 3)
    b = np.ones(9)
    with pytest.raises(InvalidConfigError):
        pmg_apply(M, b, 0, (), {}, dim=2)
    with pytest.raises(DimensionMismatchError):
        pmg_apply(M, b, 0, (0, 7), {}, dim=2)


def test_pmg_singular_low_system_raises():
    M = BlockSparseMatrix(uniform_layout(3, 3), uniform_layout(3, 3))
    for c in (0, 2):
        M.add_block(c, c, np.eye(3))
    M.add_block(1, 1, np.zeros((3, 3)))
    with pytest.raises(SingularSystemError):
        pmg_apply(M, np.ones(9), 0, range(3), {}, dim=2)


def test_pmg_singular_high_block_raises():
    M = BlockSparseMatrix(uniform_layout(2, 3), uniform_layout(2, 3))
    M.add_block(0, 0, np.eye(3))
    bad = np.zeros((3, 3))
    bad[0, 0] = 1.0  # invertible low part, singular high part
    M.add_block(1, 1, bad)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(SingularSystemError):
            pmg_apply(M, np.ones(6), 0, range(2), {}, dim=2)


def test_pmg_smoothing_on_benchmark():
    # Repeated application of the preconditioner as a stationary
    # iteration contracts the energy-norm error on every step, and the
    # residual 2-norm decreases monotonically after the first step.
    hier = benchmark_system()
    lv = hier.level(1)
    M = lv.matrix
    b = lv.rhs
    x_star = benchmark_direct()
    cache = {}
    cells = range(M.row_layout.num_blocks)
    x = np.zeros_like(b)
    energies = []
    residuals = []
    for _ in range(6):
        r = b - M.matvec(x)
        residuals.append(np.linalg.norm(r))
        e = x_star - x
        energies.append(float(e @ M.matvec(e)))
        x = x + pmg_apply(M, r, 1, cells, cache, dim=3)
    assert all(e2 < e1 for e1, e2 in zip(energies, energies[1:]))
    assert all(r2 < r1 for r1, r2 in zip(residuals[1:], residuals[2:]))


# ---------------------------------------------------------------------------
# overlapping-block smoother


def test_partition_8x8_degree1_target48():
    mesh, cm, imap = single_phase_2d()
    part = schwarz_partition(mesh_graph(mesh), imap, 48)
    assert part.num_blocks == 4
    assert sorted(len(core) for core in part.cores) == [16, 16, 16, 16]
    covered = sorted(c for core in part.cores for c in core)
    assert covered == list(range(64))


def test_partition_single_block_when_target_huge():
    mesh, cm, imap = single_phase_2d()
    part = schwarz_partition(mesh_graph(mesh), imap, 10_000)
    assert part.num_blocks == 1
    assert np.all(part.damping == 1.0)


def test_partition_rejects_too_small_target():
    mesh, cm, imap = single_phase_2d()
    with pytest.raises(InvalidConfigError):
        schwarz_partition(mesh_graph(mesh), imap, 2)


def test_partition_overlap_damping_counts_membership():
    mesh, cm, imap = single_phase_2d()
    part = schwarz_partition(mesh_graph(mesh), imap, 48)
    counts = np.zeros(192)
    for rows in part.block_rows:
        for blk in rows:
            counts[3 * blk : 3 * blk + 3] += 1.0
    assert np.array_equal(counts, part.damping)
    assert part.damping.min() >= 1.0
    # one-layer extensions of a 4-way partition overlap somewhere
    assert part.damping.max() >= 2.0
    # find a cell in exactly two extended blocks and check its entries
    membership = np.zeros(64, dtype=int)
    for blk in part.blocks:
        membership[list(blk)] += 1
    two_way = np.flatnonzero(membership == 2)
    assert two_way.size > 0
    j = int(two_way[0])
    assert np.all(part.damping[3 * j : 3 * j + 3] == 2.0)


def test_schwarz_matches_instrumented_sum():
    mesh, cm, imap = single_phase_2d()
    part = schwarz_partition(mesh_graph(mesh), imap, 48)
    M, A = random_block_spd(64, 3, block_diagonal=True)
    rng = np.random.default_rng(11)
    r = rng.normal(size=192)
    z = schwarz_apply(M, r, part, 1)
    manual = np.zeros(192)
    for rows in part.block_rows:
        manual += pmg_apply(M, r, 1, rows, {}, dim=2)
    manual /= part.damping
    assert np.allclose(z, manual, atol=1e-13)


def test_schwarz_single_block_full_separation_exact():
    mesh, cm, imap = single_phase_2d()
    part = schwarz_partition(mesh_graph(mesh), imap, 10_000)
    M, A = random_block_spd(64, 3, seed=13)
    rng = np.random.default_rng(13)
    b = rng.normal(size=192)
    z = schwarz_apply(M, b, part, 1)
    assert np.linalg.norm(b - A @ z) <= 1e-11 * np.linalg.norm(b)


def test_schwarz_disjoint_blocks_block_diagonal_exact():
    # Two mesh components, matrix block-diagonal across them: the
    # additive combination of the per-block solves is the exact inverse.
    mesh = build_cartesian([(0.0, 1.0)] * 2, [4, 2])
    cm = classify_and_build(mesh, plane((1.0, 0.0), 10.0), 0, 3)
    imap = build_index_map(cm, 1)
    graph = mesh_graph(mesh)
    part = schwarz_partition(graph, imap, 12)  # 4 cells per core
    M, A = random_block_spd(8, 3, seed=17, block_diagonal=True)
    rng = np.random.default_rng(17)
    b = rng.normal(size=24)
    z = schwarz_apply(M, b, part, 1)
    assert np.allclose(A @ z, b / part.damping * part.damping, atol=1e-10)


# ---------------------------------------------------------------------------
# residual minimization


def check_rm_invariants(state, M_dense, r):
    W = state.W
    Z = state.Z
    if W.shape[1]:
        gram = W.T @ W - np.eye(W.shape[1])
        assert np.abs(gram).max() <= 1e-11
        assert np.abs(W - M_dense @ Z).max() <= 1e-11 * np.abs(M_dense).max()
        assert np.abs(W.T @ r).max() <= 1e-10


def test_rm_exact_candidate_zeroes_residual():
    M, A = random_block_spd(3, 3, seed=21)
    rng = np.random.default_rng(21)
    b = rng.normal(size=9)
    state = RmState(np.zeros(9), b)
    x, r, state = rm_step(state, np.linalg.solve(A, b), M)
    assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(b)
    assert np.allclose(A @ x, b, atol=1e-10)


def test_rm_invariants_over_random_candidates():
    M, A = random_block_spd(4, 3, seed=23)
    rng = np.random.default_rng(23)
    b = rng.normal(size=12)
    state = RmState(np.zeros(12), b)
    prev = np.linalg.norm(b)
    for _ in range(10):
        x, r, state = rm_step(state, rng.normal(size=12), M)
        check_rm_invariants(state, A, r)
        now = np.linalg.norm(r)
        assert now <= prev * (1.0 + 1e-12)
        prev = now
    assert np.allclose(x, state.x0 + state.Z @ state.alpha)
    assert np.allclose(r, state.r0 - state.W @ state.alpha)


def test_rm_zero_candidate_flags_dependent():
    M, _ = random_block_spd(2, 3, seed=29)
    state = RmState(np.zeros(6), np.ones(6))
    _, _, state = rm_step(state, np.zeros(6), M)
    assert state.last_dependent
    assert state.ncols == 0


def test_rm_repeated_candidate_flags_dependent():
    M, _ = random_block_spd(2, 3, seed=31)
    rng = np.random.default_rng(31)
    z = rng.normal(size=6)
    state = RmState(np.zeros(6), np.ones(6))
    _, _, state = rm_step(state, z, M)
    assert not state.last_dependent
    assert state.ncols == 1
    _, r_before, _ = rm_step(state, 2.5 * z, M)
    assert state.last_dependent
    assert state.ncols == 1
    assert state.dependent_count == 1


def test_rm_cap_restarts_and_keeps_monotonicity():
    M, A = random_block_spd(3, 3, seed=37)
    rng = np.random.default_rng(37)
    b = rng.normal(size=9)
    state = RmState(np.zeros(9), b, max_columns=2)
    norms = [np.linalg.norm(b)]
    for _ in range(5):
        x, r, state = rm_step(state, rng.normal(size=9), M)
        norms.append(np.linalg.norm(r))
    assert state.restart_count >= 1
    assert state.ncols <= 2
    assert all(b <= a * (1.0 + 1e-12) for a, b in zip(norms, norms[1:]))
    # the base point has absorbed earlier corrections
    assert np.linalg.norm(A @ x - b) < np.linalg.norm(b)


# ---------------------------------------------------------------------------
# multigrid solver


def test_omg_coarsest_level_is_direct():
    hier = benchmark_system(cells=2, num_levels=1)
    lv = hier.level(1)
    x, rep = ortho_mg_solve(hier, lv.rhs, None, SolverConfig(), 1)
    assert rep.iterations == 0
    assert rep.converged
    res = np.linalg.norm(lv.rhs - lv.matrix.matvec(x))
    assert res <= 1e-10


def test_omg_converges_on_benchmark_and_matches_direct():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=600, k_lo=1)
    x, rep = ortho_mg_solve(hier, lv.rhs, None, cfg, 1)
    assert rep.converged
    assert rep.final_residual <= 1e-10
    x_direct = benchmark_direct()
    rel = np.linalg.norm(x - x_direct) / np.linalg.norm(x_direct)
    assert rel <= 1e-6
    assert rep.dofs == lv.num_dofs


def test_omg_history_non_increasing():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=50, k_lo=1)
    _, rep = ortho_mg_solve(hier, lv.rhs, None, cfg, 1)
    hist = rep.residual_history
    assert len(hist) == rep.iterations + 1
    for a, b in zip(hist, hist[1:]):
        assert b <= a * (1.0 + 1e-12)


def test_omg_nonconvergence_is_reported_not_raised():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=3, k_lo=1)
    x, rep = ortho_mg_solve(hier, lv.rhs, None, cfg, 1)
    assert not rep.converged
    assert rep.iterations == 3
    assert rep.final_residual > 1e-10


def test_omg_three_levels_converges():
    hier = benchmark_system(num_levels=3)
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=600, k_lo=1, num_levels=3)
    x, rep = ortho_mg_solve(hier, lv.rhs, None, cfg, 1)
    assert rep.converged
    x_direct = benchmark_direct(num_levels=3)
    rel = np.linalg.norm(x - x_direct) / np.linalg.norm(x_direct)
    assert rel <= 1e-6


def test_omg_respects_initial_guess():
    hier = benchmark_system()
    lv = hier.level(1)
    x_direct = benchmark_direct()
    cfg = SolverConfig(tolerance=1e-10, max_iterations=5, k_lo=1)
    x, rep = ortho_mg_solve(hier, lv.rhs, x_direct.copy(), cfg, 1)
    assert rep.converged
    assert rep.iterations == 0
    assert np.allclose(x, x_direct)


# ---------------------------------------------------------------------------
# preconditioned GMRES


def test_gmres_identity_converges_in_one():
    M = block_identity(4, 3)
    rng = np.random.default_rng(41)
    b = rng.normal(size=12)
    x, rep = gmres_pmg_solve(M, b, SolverConfig(k_lo=1), dim=2)
    assert rep.converged
    assert rep.iterations == 1
    assert np.allclose(x, b, atol=1e-12)


def test_gmres_exact_preconditioner_two_iterations():
    M, A = random_block_spd(4, 3, seed=43)
    rng = np.random.default_rng(43)
    b = rng.normal(size=12)
    x, rep = gmres_pmg_solve(M, b, SolverConfig(k_lo=1), dim=2)
    assert rep.converged
    assert rep.iterations <= 2
    assert np.linalg.norm(b - A @ x) <= 1e-10 * np.linalg.norm(b)


def test_gmres_benchmark_matches_direct():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=1000, k_lo=1)
    x, rep = gmres_pmg_solve(lv.matrix, lv.rhs, cfg, dim=3)
    x_direct = benchmark_direct()
    rel = np.linalg.norm(x - x_direct) / np.linalg.norm(x_direct)
    assert rel <= 1e-8
    assert rep.residual_history[-1] == rep.final_residual


def test_gmres_nonconvergence_reported():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=5, k_lo=1)
    _, rep = gmres_pmg_solve(lv.matrix, lv.rhs, cfg, dim=3)
    assert not rep.converged
    assert rep.final_residual > 1e-10


# ---------------------------------------------------------------------------
# cross-solver equivalence


def test_converged_solvers_agree_with_each_other():
    hier = benchmark_system()
    lv = hier.level(1)
    cfg = SolverConfig(tolerance=1e-10, max_iterations=1000, k_lo=1)
    x_omg, rep_omg = ortho_mg_solve(hier, lv.rhs, None, cfg, 1)
    assert rep_omg.converged
    x_g, _ = gmres_pmg_solve(lv.matrix, lv.rhs, cfg, dim=3)
    rel = np.linalg.norm(x_omg - x_g) / np.linalg.norm(x_omg)
    assert rel <= 1e-6
