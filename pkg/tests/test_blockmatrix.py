import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutdg.blockmatrix import (
    BlockLayout,
    BlockSparseMatrix,
    bs_matmat,
    bs_matvec,
    direct_apply,
    direct_factor,
    read_matrix_market,
    uniform_layout,
    write_matrix_market,
)
from cutdg.errors import (
    DimensionMismatchError,
    LayoutMismatchError,
    SingularSystemError,
)


def random_block_matrix(rng, row_sizes, col_sizes, density=0.5):
    M = BlockSparseMatrix(BlockLayout(tuple(row_sizes)), BlockLayout(tuple(col_sizes)))
    for bi in range(len(row_sizes)):
        for bj in range(len(col_sizes)):
            if rng.uniform() < density or bi == bj:
                M.add_block(
                    bi, bj, rng.standard_normal((row_sizes[bi], col_sizes[bj]))
                )
    return M


def test_identity_matvec():
    layout = uniform_layout(3, 2)
    M = BlockSparseMatrix(layout, layout)
    for b in range(3):
        M.add_block(b, b, np.eye(2))
    x = np.arange(6.0)
    assert np.allclose(bs_matvec(M, x), x)


def test_matvec_matches_dense_oracle():
    rng = np.random.default_rng(3)
    M = random_block_matrix(rng, [3, 5, 2], [4, 1, 5])
    x = rng.standard_normal(10)
    y = bs_matvec(M, x)
    y_dense = M.to_dense() @ x
    assert np.linalg.norm(y - y_dense) <= 1e-13 * np.linalg.norm(y_dense)


def test_matvec_dimension_error():
    M = BlockSparseMatrix(uniform_layout(2, 2), uniform_layout(2, 2))
    with pytest.raises(DimensionMismatchError):
        bs_matvec(M, np.zeros(5))


def test_add_block_accumulates():
    layout = uniform_layout(1, 2)
    M = BlockSparseMatrix(layout, layout)
    M.add_block(0, 0, np.eye(2))
    M.add_block(0, 0, np.eye(2))
    assert np.allclose(M.get_block(0, 0), 2 * np.eye(2))


def test_add_block_shape_check():
    M = BlockSparseMatrix(uniform_layout(2, 2), uniform_layout(2, 3))
    with pytest.raises(DimensionMismatchError):
        M.add_block(0, 0, np.zeros((2, 2)))


def test_matmat_identity():
    rng = np.random.default_rng(4)
    A = random_block_matrix(rng, [2, 3], [2, 3])
    I = BlockSparseMatrix(A.col_layout, A.col_layout)
    for b, size in enumerate(A.col_layout.sizes):
        I.add_block(b, b, np.eye(size))
    C = bs_matmat(A, I)
    assert np.allclose(C.to_dense(), A.to_dense())


def test_matmat_matches_dense_oracle():
    rng = np.random.default_rng(5)
    A = random_block_matrix(rng, [3, 2], [4, 2])
    B = random_block_matrix(rng, [4, 2], [3, 3])
    C = bs_matmat(A, B)
    ref = A.to_dense() @ B.to_dense()
    assert np.max(np.abs(C.to_dense() - ref)) <= 1e-12 * max(
        1.0, np.max(np.abs(ref))
    )


def test_matmat_layout_mismatch():
    rng = np.random.default_rng(6)
    A = random_block_matrix(rng, [2], [3])
    B = random_block_matrix(rng, [2], [2])
    with pytest.raises(LayoutMismatchError):
        bs_matmat(A, B)


@given(seed=st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_matvec_linearity(seed):
    rng = np.random.default_rng(seed)
    M = random_block_matrix(rng, [3, 4], [3, 4])
    x = rng.standard_normal(7)
    y = rng.standard_normal(7)
    a = float(rng.standard_normal())
    lhs = bs_matvec(M, a * x + y)
    rhs = a * bs_matvec(M, x) + bs_matvec(M, y)
    scale = max(np.linalg.norm(lhs), 1.0)
    assert np.linalg.norm(lhs - rhs) <= 1e-13 * scale


def test_transpose_consistency():
    rng = np.random.default_rng(7)
    M = random_block_matrix(rng, [3, 3], [3, 3])
    x = rng.standard_normal(6)
    y = rng.standard_normal(6)
    assert x @ bs_matvec(M, y) == pytest.approx(
        y @ bs_matvec(M.transpose(), x), rel=1e-13
    )


def test_matmat_associativity_against_dense():
    rng = np.random.default_rng(8)
    A = random_block_matrix(rng, [4, 4], [3, 5])
    B = random_block_matrix(rng, [3, 5], [6, 2])
    C = random_block_matrix(rng, [6, 2], [4, 4])
    left = bs_matmat(bs_matmat(A, B), C).to_dense()
    right = bs_matmat(A, bs_matmat(B, C)).to_dense()
    assert np.max(np.abs(left - right)) <= 1e-11 * max(1.0, np.max(np.abs(left)))


def test_direct_factor_1x1():
    M = BlockSparseMatrix(uniform_layout(1, 1), uniform_layout(1, 1))
    M.add_block(0, 0, np.array([[5.0]]))
    F = direct_factor(M)
    assert direct_apply(F, np.array([10.0]))[0] == pytest.approx(2.0)


def test_direct_factor_residual_and_reuse():
    rng = np.random.default_rng(9)
    layout = uniform_layout(5, 4)
    M = BlockSparseMatrix(layout, layout)
    for b in range(5):
        A = rng.standard_normal((4, 4))
        M.add_block(b, b, A @ A.T + 4 * np.eye(4))
        if b + 1 < 5:
            M.add_block(b, b + 1, 0.1 * rng.standard_normal((4, 4)))
            M.add_block(b + 1, b, 0.1 * rng.standard_normal((4, 4)))
    F = direct_factor(M)
    for _ in range(2):  # second apply reuses the factorization
        b = rng.standard_normal(20)
        x = direct_apply(F, b)
        resid = np.linalg.norm(b - bs_matvec(M, x)) / np.linalg.norm(b)
        assert resid <= 1e-12
    assert F.factor_count == 1


def test_direct_factor_singular():
    M = BlockSparseMatrix(uniform_layout(1, 2), uniform_layout(1, 2))
    M.add_block(0, 0, np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularSystemError):
        F = direct_factor(M)
        direct_apply(F, np.ones(2))


def test_restrict_modes():
    rng = np.random.default_rng(10)
    layout = uniform_layout(3, 4)
    M = random_block_matrix(rng, layout.sizes, layout.sizes, density=1.0)
    sub = M.restrict_modes(2, 2)
    dense = M.to_dense()
    keep = np.concatenate([[0, 1], [4, 5], [8, 9]])
    assert np.allclose(sub.toarray(), dense[np.ix_(keep, keep)])


def test_extract_block_submatrix():
    rng = np.random.default_rng(11)
    M = random_block_matrix(rng, [2, 3, 4], [2, 3, 4], density=1.0)
    sub = M.extract_block_submatrix([0, 2], [0, 2])
    dense = M.to_dense()
    keep = np.concatenate([np.arange(2), np.arange(5, 9)])
    assert np.allclose(sub.to_dense(), dense[np.ix_(keep, keep)])


def test_matrix_market_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    M = random_block_matrix(rng, [2, 3], [2, 3])
    path = tmp_path / "system.mtx"
    write_matrix_market(path, M)
    back = read_matrix_market(path)
    assert np.max(np.abs(back.toarray() - M.to_dense())) < 1e-12
