import numpy as np
import pytest

from mfspde.errors import ValidationError
from mfspde.triple import (
    DiscreteTriple,
    OperatorProcess,
    TimeGrid,
    adjoint_in_H,
    check_boundedness,
    check_coercivity,
    embedding_constant,
    h_inner,
    identity_triple,
    required_lambda,
    zero_operator,
)


def dirichlet_stiffness(n, h=1.0):
    """Standard 1-D Dirichlet stiffness matrix (second-difference form)."""
    k = np.zeros((n, n))
    idx = np.arange(n)
    k[idx, idx] = 2.0 / h
    k[idx[:-1], idx[:-1] + 1] = -1.0 / h
    k[idx[1:], idx[1:] - 1] = -1.0 / h
    return k


class TestHInner:
    def test_orthonormal_identity_case(self):
        tri = identity_triple(2)
        assert h_inner([1.0, 0.0], [0.0, 1.0], tri) == 0.0

    def test_diagonal_metric(self):
        tri = DiscreteTriple(np.diag([1.0, 2.0]), np.diag([1.0, 2.0]))
        assert h_inner([1.0, 1.0], [1.0, 1.0], tri) == pytest.approx(3.0)

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((4, 4))
        gram = g @ g.T + 4 * np.eye(4)
        tri = DiscreteTriple(gram, gram.copy())
        for _ in range(100):
            x = rng.standard_normal(4)
            y = rng.standard_normal(4)
            assert h_inner(x, y, tri) == pytest.approx(h_inner(y, x, tri), abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        tri = identity_triple(3)
        with pytest.raises(ValidationError):
            h_inner([1.0, 2.0], [1.0, 2.0, 3.0], tri)


class TestTripleValidation:
    def test_rejects_nonsymmetric_gram(self):
        with pytest.raises(ValidationError):
            DiscreteTriple(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2))

    def test_rejects_indefinite_gram(self):
        with pytest.raises(ValidationError):
            DiscreteTriple(np.diag([1.0, -1.0]), np.eye(2))

    def test_embedding_constant_dominates(self):
        rng = np.random.default_rng(3)
        gram_h = np.eye(3)
        gram_v = np.diag([2.0, 3.0, 5.0])
        tri = DiscreteTriple(gram_h, gram_v)
        c = embedding_constant(tri)
        assert c == pytest.approx(np.sqrt(2.0))
        for _ in range(50):
            x = rng.standard_normal(3)
            assert tri.v_norm(x) >= c * tri.h_norm(x) - 1e-12


class TestCoercivity:
    def test_scalar_pass(self):
        tri = identity_triple(1)
        assert check_coercivity(np.array([[1.0]]), tri, alpha=1.0, lam=0.0).passed

    def test_scalar_negative_operator_needs_lambda(self):
        tri = identity_triple(1)
        assert check_coercivity(np.array([[-1.0]]), tri, alpha=1.0, lam=2.0).passed
        assert not check_coercivity(np.array([[-1.0]]), tri, alpha=1.0, lam=1.5).passed

    def test_laplacian_stiffness_with_matched_gram(self):
        # Oracle: with gram_v = K + I, the form K + 1*I - 1*(K + I) is exactly 0,
        # so the pencil eigenvalues certify a pass with alpha = lambda = 1.
        k = dirichlet_stiffness(16)
        tri = DiscreteTriple(np.eye(16), k + np.eye(16))
        rep = check_coercivity(k, tri, alpha=1.0, lam=1.0)
        assert rep.passed
        assert rep.value == pytest.approx(0.0, abs=1e-10)

    def test_monotone_in_alpha_and_lambda(self):
        rng = np.random.default_rng(5)
        k = dirichlet_stiffness(8)
        tri = DiscreteTriple(np.eye(8), k + np.eye(8))
        a = k + 0.1 * rng.standard_normal((8, 8))
        base_alpha, base_lam = 0.5, 2.0
        if check_coercivity(a, tri, base_alpha, base_lam).passed:
            assert check_coercivity(a, tri, base_alpha * 0.5, base_lam).passed
            assert check_coercivity(a, tri, base_alpha, base_lam + 1.0).passed

    def test_required_lambda_is_tight(self):
        k = dirichlet_stiffness(10)
        tri = DiscreteTriple(np.eye(10), k + np.eye(10))
        lam = required_lambda(-k, tri, alpha=0.25)
        assert check_coercivity(-k, tri, 0.25, lam + 1e-8).passed
        assert not check_coercivity(-k, tri, 0.25, lam - 1e-3).passed

    def test_nonfinite_rejected(self):
        tri = identity_triple(2)
        bad = np.array([[np.nan, 0.0], [0.0, 1.0]])
        with pytest.raises(ValidationError):
            check_coercivity(bad, tri, 1.0, 0.0)


class TestBoundedness:
    def test_zero_operator(self):
        tri = identity_triple(4)
        assert check_boundedness(np.zeros((4, 4)), tri, 1e-6).passed

    def test_scalar_fail(self):
        tri = identity_triple(1)
        assert not check_boundedness(np.array([[3.0]]), tri, 2.0).passed

    def test_laplacian_exactly_at_pencil_bound(self):
        # Oracle: for symmetric K and gram_h = I the V->V* norm is the largest
        # eigenvalue of the (K, gram_v) pencil.
        k = dirichlet_stiffness(12)
        gram_v = k + np.eye(12)
        tri = DiscreteTriple(np.eye(12), gram_v)
        l = np.linalg.cholesky(gram_v)
        linv = np.linalg.inv(l)
        pencil_max = float(np.linalg.eigvalsh(linv @ k @ linv.T).max())
        assert check_boundedness(k, tri, pencil_max).passed
        assert not check_boundedness(k, tri, pencil_max * 0.999).passed


class TestAdjoint:
    def test_symmetric_self_adjoint_euclidean(self):
        tri = identity_triple(3)
        a = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]])
        assert np.allclose(adjoint_in_H(a, tri), a)

    def test_weighted_metric_oracle(self):
        # Duality identity on basis vectors fixes A* = [[0,0],[1/2,0]] for
        # gram_h = diag(1,2), A = [[0,1],[0,0]].
        tri = DiscreteTriple(np.diag([1.0, 2.0]), np.diag([1.0, 2.0]))
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        a_star = adjoint_in_H(a, tri)
        assert np.allclose(a_star, [[0.0, 0.0], [0.5, 0.0]])
        for i in range(2):
            for j in range(2):
                e_i, e_j = np.eye(2)[i], np.eye(2)[j]
                assert h_inner(a @ e_i, e_j, tri) == pytest.approx(
                    h_inner(e_i, a_star @ e_j, tri), abs=1e-12
                )

    def test_involution(self):
        rng = np.random.default_rng(11)
        g = rng.standard_normal((5, 5))
        gram = g @ g.T + 5 * np.eye(5)
        tri = DiscreteTriple(gram, gram.copy())
        a = rng.standard_normal((5, 5))
        assert np.allclose(adjoint_in_H(adjoint_in_H(a, tri), tri), a, atol=1e-10)

    def test_duality_identity_random(self):
        rng = np.random.default_rng(13)
        g = rng.standard_normal((4, 4))
        gram = g @ g.T + 4 * np.eye(4)
        tri = DiscreteTriple(gram, gram + np.eye(4))
        for _ in range(100):
            a = rng.standard_normal((4, 4))
            x = rng.standard_normal(4)
            y = rng.standard_normal(4)
            lhs = h_inner(a @ x, y, tri)
            rhs = h_inner(x, adjoint_in_H(a, tri) @ y, tri)
            bound = 1e-10 * (
                1.0
                + np.linalg.norm(x) * np.linalg.norm(y) * np.linalg.norm(a)
            )
            assert abs(lhs - rhs) <= bound


class TestTimeGrid:
    def test_nodes(self):
        grid = TimeGrid(2.0, 4)
        assert grid.dt == pytest.approx(0.5)
        assert np.allclose(grid.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_rejects_bad_steps(self):
        with pytest.raises(ValidationError):
            TimeGrid(1.0, 0)
        with pytest.raises(ValidationError):
            TimeGrid(-1.0, 4)


class TestOperatorProcess:
    def test_validate_passes_for_stiffness(self):
        k = dirichlet_stiffness(6)
        tri = DiscreteTriple(np.eye(6), k + np.eye(6))
        op = OperatorProcess(k, alpha=1.0, lam=1.0, bound_c=10.0)
        op.validate(tri)

    def test_validate_names_failing_node(self):
        tri = identity_triple(2)
        stack = np.stack([np.eye(2), -5.0 * np.eye(2)])
        op = OperatorProcess(stack, alpha=1.0, lam=0.0, bound_c=10.0)
        with pytest.raises(ValidationError, match="node 1"):
            op.validate(tri)

    def test_zero_operator_validates(self):
        tri = DiscreteTriple(np.eye(3), 2.0 * np.eye(3))
        zero_operator(3, tri).validate(tri)
