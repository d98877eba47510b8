import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from migsys.solver import FitOptions, fit, init_factors, normalize, residual_init, update_factor
from migsys.synth import PlantSpec, congruence_score, plant_model, synth_tensor
from migsys.tensor import FactorModel, MaskSpec, compose, masked_residual
from oracles import masked_block_nnls


def planted(I=8, J=8, K=5, F=3, seed=0, noise=0.0, support=2):
    truth = plant_model(PlantSpec(I, J, K, F, support, support, seed=seed))
    X, mask = synth_tensor(truth, noise, seed)
    return truth, X, mask


# -- options and initialization ----------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(rank=0), dict(rank=2, tol=0.0), dict(rank=2, restarts=0),
    dict(rank=2, mask_strategy="guess"), dict(rank=2, threads=0), dict(rank=2, init="zeros"),
])
def test_fit_options_validation(bad):
    with pytest.raises(ValueError):
        FitOptions(**bad)


def test_fit_options_defaults():
    o = FitOptions(rank=6)
    assert (o.max_outer_iters, o.tol, o.restarts, o.inner_iters) == (500, 1e-7, 5, 1)
    assert o.mask_strategy == "exact-masked"


def test_init_factors_deterministic_and_in_range():
    a, b = init_factors(4, 5, 3, 2, 7), init_factors(4, 5, 3, 2, 7)
    for U, V in zip(a.factors, b.factors):
        np.testing.assert_array_equal(U, V)
    c = init_factors(4, 5, 3, 2, 8)
    assert any(np.any(U != V) for U, V in zip(a.factors, c.factors))
    for U in a.factors:
        assert np.all((U >= 0) & (U < 1))
    np.testing.assert_array_equal(a.weights, np.ones(2))


def test_residual_init_shapes_nonnegative():
    _, X, mask = planted()
    m = residual_init(mask.apply(X), mask, 3, 0)
    assert m.shape == X.shape and m.rank == 3
    assert all(np.all(U >= 0) for U in m.factors)


# -- normalize ----------------------------------------------------------------------

def test_normalize_hand_case():
    a = np.array([[3.0], [4.0], [0.0]])
    b = np.array([[1.0], [0.0]])
    c = np.array([[0.0], [1.0]])
    n = normalize(FactorModel(a, b, c, [1.0]))
    np.testing.assert_allclose(n.A[:, 0], [0.6, 0.8, 0.0])
    assert n.weights[0] == pytest.approx(5.0)


def test_normalize_idempotent_and_fit_invariant(rng):
    m = FactorModel(rng.random((5, 3)) * 4, rng.random((6, 3)), rng.random((4, 3)) * 9,
                    rng.random(3))
    n = normalize(m)
    rel = np.linalg.norm(compose(n) - compose(m)) / np.linalg.norm(compose(m))
    assert rel < 1e-10
    for U in n.factors:
        np.testing.assert_allclose(np.linalg.norm(U, axis=0), 1.0, atol=1e-10)
    nn = normalize(n)
    np.testing.assert_allclose(nn.weights, n.weights, rtol=1e-14)


def test_normalize_zero_column(caplog):
    A = np.array([[1.0, 0.0], [1.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        n = normalize(FactorModel(A, np.ones((2, 2)), np.ones((3, 2))))
    assert n.weights[1] == 0.0 and not n.A[:, 1].any()
    assert "zero factor column" in caplog.text


# -- update_factor ------------------------------------------------------------------

def test_update_fixed_point_at_truth():
    truth, X, mask = planted()
    for mode in (1, 2, 3):
        U = update_factor(X, mask, truth, mode)
        np.testing.assert_allclose(U, truth.factors[mode - 1], atol=1e-10)


def test_single_update_never_increases_loss():
    rng = np.random.default_rng(3)
    for trial in range(100):
        I, J, K, F = rng.integers(3, 7), rng.integers(3, 7), rng.integers(2, 5), rng.integers(1, 4)
        X = rng.random((I, J, K)) * 5
        X[np.arange(min(I, J)), np.arange(min(I, J)), :] = 1e4
        mask = MaskSpec.diagonal_off(X.shape)
        m = init_factors(I, J, K, F, trial)
        mode = int(rng.integers(1, 4))
        strategy = ("exact-masked", "em-impute")[trial % 2]
        before = masked_residual(X, m, mask)
        U = update_factor(X, mask, m, mode, strategy=strategy)
        assert np.all(U >= 0)
        after = masked_residual(X, m.with_factor(mode, U), mask)
        assert after <= before + 1e-9


def test_exact_update_converges_to_block_nnls():
    # Many sweeps on one block reach the masked NNLS optimum of that block.
    rng = np.random.default_rng(5)
    X = rng.random((5, 4, 3))
    m = init_factors(5, 4, 3, 2, 1)
    for mode in (1, 2, 3):
        U = update_factor(X, MaskSpec.diagonal_off(X.shape), m, mode, sweeps=3000)
        ref = masked_block_nnls(X, m.A, m.B, m.C, mode)
        np.testing.assert_allclose(U, ref, atol=1e-7)


def test_explicit_mask_update_matches_diagonal():
    rng = np.random.default_rng(9)
    X = rng.random((4, 4, 3))
    m = init_factors(4, 4, 3, 2, 0)
    diag = MaskSpec.diagonal_off(X.shape)
    expl = MaskSpec.explicit(diag.dense())
    for mode in (1, 2, 3):
        np.testing.assert_allclose(update_factor(X, diag, m, mode),
                                   update_factor(X, expl, m, mode), rtol=1e-11, atol=1e-13)


def test_degenerate_column_reset_is_logged(caplog):
    X = np.random.default_rng(0).random((3, 3, 2))
    A = np.ones((3, 2))
    B = np.ones((3, 2))
    B[:, 1] = 0.0            # component 1 cannot see mode 1
    m = FactorModel(A, B, np.ones((2, 2)))
    with caplog.at_level(logging.WARNING):
        U = update_factor(X, MaskSpec.diagonal_off(X.shape), m, 1)
    assert "re-seeded" in caplog.text
    assert np.all(U[:, 1] > 0)


# -- fit --------------------------------------------------------------------------------

def test_fit_planted_rank3_8x8x6():
    truth, X, mask = planted(8, 8, 6, 3, seed=1)
    r = fit(X, mask, FitOptions(rank=3, seed=0))
    assert congruence_score(truth, r.model) >= 0.99
    assert r.relative_residual < 1e-6


def test_fit_rank_one_exact():
    rng = np.random.default_rng(2)
    a, b, c = rng.random(6), rng.random(6), rng.random(4)
    X = 7.0 * np.einsum("i,j,k->ijk", a, b, c)
    X[np.arange(6), np.arange(6), :] = 0.0
    r = fit(X, MaskSpec.diagonal_off(X.shape), FitOptions(rank=1))
    assert r.relative_residual < 1e-6


def test_fit_deterministic_and_thread_independent():
    _, X, mask = planted(seed=4, noise=0.05)
    r1 = fit(X, mask, FitOptions(rank=3, seed=11, restarts=3))
    r2 = fit(X, mask, FitOptions(rank=3, seed=11, restarts=3))
    r3 = fit(X, mask, FitOptions(rank=3, seed=11, restarts=3, threads=3))
    assert r1.loss_trace == r2.loss_trace == r3.loss_trace
    for U, V in zip(r1.model.factors, r3.model.factors):
        np.testing.assert_array_equal(U, V)
    assert r1.restart_seeds == [11, 12, 13] and r1.seed_used in r1.restart_seeds


def test_fit_output_normalized_sorted_nonnegative():
    _, X, mask = planted(seed=2, noise=0.05)
    r = fit(X, mask, FitOptions(rank=3, restarts=2))
    m = r.model
    assert np.all(np.diff(m.weights) <= 0)
    for U in m.factors:
        assert np.all(U >= 0)
        np.testing.assert_allclose(np.linalg.norm(U, axis=0), 1.0, atol=1e-10)
    assert r.iterations_used == len(r.loss_trace) - 1


def test_fit_errors():
    X = np.ones((3, 3, 2))
    mask = MaskSpec.diagonal_off(X.shape)
    bad = X.copy()
    bad[0, 1, 0] = np.inf
    with pytest.raises(ValueError):
        fit(bad, mask, FitOptions(rank=1))
    with pytest.raises(ValueError):
        fit(X, mask, FitOptions(rank=6))          # min(IJ, IK, JK) = 6
    with pytest.raises(ValueError):
        fit(X, MaskSpec.diagonal_off((3, 3, 3)), FitOptions(rank=1))


def test_strategies_agree_on_planted_8x8x5():
    _, X, mask = planted(8, 8, 5, 3, seed=6)
    exact = fit(X, mask, FitOptions(rank=3, seed=0, tol=1e-12, max_outer_iters=3000))
    em = fit(X, mask, FitOptions(rank=3, seed=0, tol=1e-12, max_outer_iters=3000,
                                 mask_strategy="em-impute"))
    off = mask.dense() > 0
    diff = np.abs(compose(exact.model) - compose(em.model))[off]
    assert diff.max() < 1e-4 * max(1.0, np.abs(X[off]).max())


@given(st.integers(0, 10_000))
def test_loss_trace_monotone_small_problems(seed):
    rng = np.random.default_rng(seed)
    I, J, K = (int(v) for v in rng.integers(3, 6, 3))
    F = int(rng.integers(1, 4))
    X = rng.random((I, J, K)) ** 3 * 10
    mask = MaskSpec.diagonal_off(X.shape)
    strategy = ("exact-masked", "em-impute")[seed % 2]
    r = fit(X, mask, FitOptions(rank=F, seed=seed, restarts=2, max_outer_iters=60,
                                mask_strategy=strategy))
    for trace in r.restart_traces:
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
