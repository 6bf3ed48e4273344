"""Oracle tests for the three BFGS forms and direct-Hessian products.

Cross-form agreement is the main oracle: the iterative, compact, and
two-loop constructions must produce the same matrix action.
"""
import numpy as np
import pytest

from aggbfgs import forms
from aggbfgs.errors import CurvatureViolation, InvalidInput
from aggbfgs.forms import InitialMatrix
from aggbfgs.pairs import CurvaturePair


def quad_pairs(n, m, seed, cond=100.0):
    """Curvature pairs from a random SPD quadratic (guarantees s'y > 0)."""
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = (U * np.logspace(0, np.log10(cond), n)) @ U.T
    out = []
    for _ in range(m):
        s = rng.standard_normal(n)
        out.append(CurvaturePair(s=s, y=A @ s))
    return out


# ------------------------------------------------------------ InitialMatrix

def test_initial_scaled_identity():
    W = InitialMatrix.scaled_identity(2.0, 3)
    assert np.allclose(W.as_dense(), 2.0 * np.eye(3))
    v = np.array([1.0, 2.0, 3.0])
    assert np.allclose(W.apply(v), 2.0 * v)
    assert np.allclose(W.apply_inv(v), 0.5 * v)


def test_initial_diagonal():
    W = InitialMatrix.diagonal(np.array([1.0, 4.0]))
    assert np.allclose(W.as_dense(), np.diag([1.0, 4.0]))
    assert np.allclose(W.apply_inv(np.array([2.0, 8.0])), [2.0, 2.0])


def test_initial_rejects_nonpositive():
    with pytest.raises(InvalidInput):
        InitialMatrix.scaled_identity(0.0, 2)
    with pytest.raises(InvalidInput):
        InitialMatrix.diagonal(np.array([1.0, -1.0]))


# ----------------------------------------------------------- iterative form

def test_iterative_zero_pairs():
    W = InitialMatrix.scaled_identity(3.0, 4)
    assert np.allclose(forms.bfgs_iterative(W, []), 3.0 * np.eye(4))


def test_iterative_scalar_closed_form():
    # n=1: s=1, y=2 gives Wbar = 0.5, and the secant check 0.5*2 = 1 = s
    W = InitialMatrix.scaled_identity(1.0, 1)
    pair = CurvaturePair(s=np.array([1.0]), y=np.array([2.0]))
    Wb = forms.bfgs_iterative(W, [pair])
    assert np.allclose(Wb, [[0.5]])


def test_iterative_secant():
    pairs = quad_pairs(6, 4, seed=3)
    W = InitialMatrix.scaled_identity(1.0, 6)
    Wb = forms.bfgs_iterative(W, pairs)
    s, y = pairs[-1].s, pairs[-1].y
    assert np.linalg.norm(Wb @ y - s) <= 1e-10 * np.linalg.norm(s)


def test_iterative_spd():
    pairs = quad_pairs(8, 8, seed=5, cond=1e4)
    W = InitialMatrix.diagonal(np.linspace(0.5, 2.0, 8))
    Wb = forms.bfgs_iterative(W, pairs)
    np.linalg.cholesky(Wb)  # raises if not SPD


def test_iterative_curvature_violation():
    W = InitialMatrix.scaled_identity(1.0, 2)
    bad = CurvaturePair.__new__(CurvaturePair)  # bypass validation
    bad.s = np.array([1.0, 0.0])
    bad.y = np.array([-1.0, 0.0])
    bad.rho = -1.0
    with pytest.raises(CurvatureViolation):
        forms.bfgs_iterative(W, [bad])


def test_dense_guard():
    W = InitialMatrix.scaled_identity(1.0, 512)
    with pytest.raises(InvalidInput):
        forms.bfgs_iterative(W, [])


# ------------------------------------------------------------- compact form

def test_compact_scalar_closed_form():
    # R = D = [2], Y'WY = [4]: Wbar = 1 + 1.5 - 2 = 0.5
    W = InitialMatrix.scaled_identity(1.0, 1)
    pair = CurvaturePair(s=np.array([1.0]), y=np.array([2.0]))
    assert np.allclose(forms.bfgs_compact(W, [pair]), [[0.5]])


def test_compact_zero_pairs():
    W = InitialMatrix.diagonal(np.array([2.0, 3.0]))
    assert np.allclose(forms.bfgs_compact(W, []), np.diag([2.0, 3.0]))


def test_compact_matches_iterative():
    for seed, (n, m) in [(0, (4, 3)), (1, (8, 5)), (2, (16, 9))]:
        pairs = quad_pairs(n, m, seed=seed)
        W = InitialMatrix.scaled_identity(1.3, n)
        A = forms.bfgs_iterative(W, pairs)
        B = forms.bfgs_compact(W, pairs)
        assert np.max(np.abs(A - B)) <= 1e-12 * np.max(np.abs(A))


# ----------------------------------------------------------------- two-loop

def test_two_loop_zero_pairs():
    W = InitialMatrix.diagonal(np.array([2.0, 5.0]))
    g = np.array([1.0, 1.0])
    assert np.allclose(forms.two_loop_apply(W, [], g), [2.0, 5.0])


def test_two_loop_scalar():
    W = InitialMatrix.scaled_identity(1.0, 1)
    pair = CurvaturePair(s=np.array([1.0]), y=np.array([2.0]))
    assert np.allclose(forms.two_loop_apply(W, [pair], np.array([1.0])), [0.5])


def test_two_loop_matches_dense():
    rng = np.random.default_rng(12)
    pairs = quad_pairs(16, 5, seed=8)
    W = InitialMatrix.scaled_identity(0.7, 16)
    Wb = forms.bfgs_iterative(W, pairs)
    for _ in range(5):
        g = rng.standard_normal(16)
        ref = Wb @ g
        got = forms.two_loop_apply(W, pairs, g)
        assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)


# ------------------------------------------------------------- direct apply

def test_direct_apply_zero_pairs():
    W = InitialMatrix.diagonal(np.array([2.0, 4.0]))
    V = np.array([[2.0], [4.0]])
    assert np.allclose(forms.direct_apply(W, [], V), [[1.0], [1.0]])


def test_direct_apply_scalar():
    # Wbar = 0.5, so the direct Hessian maps 1 -> 2
    W = InitialMatrix.scaled_identity(1.0, 1)
    pair = CurvaturePair(s=np.array([1.0]), y=np.array([2.0]))
    out = forms.direct_apply(W, [pair], np.array([[1.0]]))
    assert np.allclose(out, [[2.0]])


def test_direct_apply_matches_dense_inverse():
    rng = np.random.default_rng(21)
    pairs = quad_pairs(6, 2, seed=13)
    W = InitialMatrix.scaled_identity(1.0, 6)
    V = rng.standard_normal((6, 3))
    Wb = forms.bfgs_iterative(W, pairs)
    ref = np.linalg.solve(Wb, V)
    got = forms.direct_apply(W, pairs, V)
    assert np.max(np.abs(got - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_direct_apply_vector_shape():
    pairs = quad_pairs(5, 3, seed=30)
    W = InitialMatrix.scaled_identity(2.0, 5)
    v = np.arange(1.0, 6.0)
    out = forms.direct_apply(W, pairs, v)
    assert out.shape == (5,)
    ref = np.linalg.solve(forms.bfgs_iterative(W, pairs), v)
    assert np.allclose(out, ref, atol=1e-8 * np.max(np.abs(ref)))


# -------------------------------------------------------------- invariants

def test_form_equivalence_sweep():
    rng = np.random.default_rng(99)
    for trial in range(20):
        n = int(rng.integers(2, 33))
        m = int(rng.integers(1, n + 1))
        pairs = quad_pairs(n, m, seed=1000 + trial, cond=1e3)
        W = InitialMatrix.scaled_identity(float(rng.uniform(0.5, 2.0)), n)
        A = forms.bfgs_iterative(W, pairs)
        B = forms.bfgs_compact(W, pairs)
        scale = np.max(np.abs(A))
        assert np.max(np.abs(A - B)) <= 1e-12 * scale
        basis = np.eye(n)
        two = np.column_stack(
            [forms.two_loop_apply(W, pairs, basis[:, i]) for i in range(n)])
        assert np.max(np.abs(two - A)) <= 1e-12 * scale
