import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from epidemic_learning.errors import InvalidParam, OutOfRange
from epidemic_learning.problems import (
    LabeledDataset,
    QuadraticEnsemble,
    dirichlet_partition,
    global_grad,
    global_loss,
    grad_oracle,
    grad_oracle_all,
    load_csv_dataset,
    make_blobs,
    make_dirichlet_quadratic,
    make_quadratic,
    optimum,
)


def _ens(seed=7, n=32, d=10, L=1.0, H=2.0, sigma=1.0):
    return make_quadratic(n, d, L, H, sigma, np.random.default_rng(seed))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 12), st.floats(0.1, 10), st.floats(0, 5),
       st.integers(0, 2**32 - 1))
def test_heterogeneity_exact_at_any_point(n, d, L, H, seed):
    ens = make_quadratic(n, d, L, H, 1.0, np.random.default_rng(seed))
    dev = ens.offsets - ens.offsets.mean(0)
    assert np.mean(np.sum(dev**2, axis=1)) == pytest.approx(H**2, rel=1e-10, abs=1e-20)
    assert ens.L == L
    assert np.all(ens.curvature >= L / 10 - 1e-12)
    for x in np.random.default_rng(seed + 1).standard_normal((3, d)):
        assert ens.heterogeneity_sq(x) == pytest.approx(H**2, rel=1e-9, abs=1e-18)


def test_zero_heterogeneity_equalises_gradients():
    ens = _ens(H=0.0)
    assert np.all(ens.offsets == ens.offsets[0])
    x = np.random.default_rng(0).standard_normal(ens.d)
    g = ens.local_grads(x)
    np.testing.assert_allclose(g, np.broadcast_to(global_grad(ens, x), g.shape))


def test_delta0_closed_form_matches_numeric_minimisation():
    ens = _ens()
    x_star, f_star = optimum(ens)
    res = optimize.minimize(
        lambda x: global_loss(ens, x), np.zeros(ens.d), jac=lambda x: global_grad(ens, x),
        method="BFGS", options={"gtol": 1e-12},
    )
    numeric = global_loss(ens, np.zeros(ens.d)) - res.fun
    assert ens.delta0(np.zeros(ens.d)) == pytest.approx(numeric, abs=1e-8)
    np.testing.assert_allclose(res.x, x_star, atol=1e-6)


def test_optimum_is_stationary_and_minimal():
    ens = _ens(seed=3)
    x_star, f_star = optimum(ens)
    assert np.max(np.abs(global_grad(ens, x_star))) <= 1e-12
    xs = np.random.default_rng(1).standard_normal((1000, ens.d)) * 3
    assert all(global_loss(ens, x) - f_star >= 0 for x in xs)


def test_global_quantities_are_node_averages():
    ens = _ens(seed=5, n=6, d=3)
    x = np.array([0.3, -1.0, 2.0])
    locals_ = [0.5 * np.sum(ens.curvature * x * x) - ens.offsets[i] @ x for i in range(6)]
    assert global_loss(ens, x) == pytest.approx(np.mean(locals_))
    np.testing.assert_allclose(global_grad(ens, x), ens.local_grads(x).mean(0))


def test_grad_oracle_noise_moments():
    ens = _ens(seed=2, sigma=1.5)
    x = np.linspace(-1, 1, ens.d)
    rng = np.random.default_rng(0)
    draws = np.stack([grad_oracle(ens, 4, x, rng) for _ in range(20_000)])
    exact = ens.curvature * x - ens.offsets[4]
    noise = draws - exact
    se = draws.std(0, ddof=1) / math.sqrt(len(draws))
    # joint test over coordinates: sum of squared z-scores is chi-square(d)
    z2 = float(np.sum((noise.mean(0) / se) ** 2))
    assert stats.chi2.sf(z2, ens.d) > 0.003
    sq = np.sum(noise**2, axis=1)
    assert abs(sq.mean() - 1.5**2) <= 3 * sq.std(ddof=1) / math.sqrt(len(sq))


def test_grad_oracle_zero_noise_is_exact():
    ens = _ens(sigma=0.0)
    x = np.ones(ens.d)
    np.testing.assert_array_equal(
        grad_oracle(ens, 0, x, np.random.default_rng(0)), ens.curvature * x - ens.offsets[0]
    )
    with pytest.raises(OutOfRange):
        grad_oracle(ens, ens.n, x, np.random.default_rng(0))


def test_grad_oracle_all_matches_node_by_node():
    ens = _ens(seed=9, n=5, d=4)
    xs = np.random.default_rng(0).standard_normal((5, 4))
    block = grad_oracle_all(ens, xs, np.random.default_rng(42))
    rng = np.random.default_rng(42)
    rows = np.stack([grad_oracle(ens, i, xs[i], rng) for i in range(5)])
    np.testing.assert_allclose(block, rows, rtol=0, atol=1e-15)


def test_make_quadratic_is_seed_deterministic():
    a, b = _ens(seed=11), _ens(seed=11)
    np.testing.assert_array_equal(a.offsets, b.offsets)
    np.testing.assert_array_equal(a.curvature, b.curvature)


def test_make_quadratic_validation():
    with pytest.raises(InvalidParam):
        make_quadratic(1, 3, 1.0, 1.0, 1.0, np.random.default_rng(0))
    with pytest.raises(InvalidParam):
        make_quadratic(4, 3, 0.0, 1.0, 1.0, np.random.default_rng(0))


def _balanced(classes, per):
    labels = np.repeat(np.arange(classes), per)
    return LabeledDataset(features=np.zeros((labels.size, 1)), labels=labels, classes=classes)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 100), st.integers(0, 2**32 - 1))
def test_partition_covers_every_item_once(n, alpha, seed):
    data = _balanced(5, 13)
    parts = dirichlet_partition(data, alpha, n, np.random.default_rng(seed))
    assert len(parts) == n
    assert sorted(i for p in parts for i in p) == list(range(len(data)))


def test_partition_single_node_gets_everything():
    data = _balanced(3, 4)
    assert dirichlet_partition(data, 0.5, 1, np.random.default_rng(0)) == [list(range(12))]


def test_partition_large_alpha_is_balanced():
    data = _balanced(2, 500)
    for seed in range(20):
        parts = dirichlet_partition(data, 1e6, 2, np.random.default_rng(seed))
        for p in parts:
            share = np.mean(data.labels[p] == 0)
            assert abs(share - 0.5) <= 0.02


def test_partition_small_alpha_is_extreme():
    data = _balanced(8, 50)
    medians = []
    for seed in range(100):
        parts = dirichlet_partition(data, 0.01, 8, np.random.default_rng(seed))
        shares = [np.bincount(data.labels[p], minlength=8).max() / len(p) for p in parts if p]
        medians.append(np.median(shares))
    assert np.median(medians) > 0.9


def test_partition_min_size_and_errors():
    data = _balanced(4, 25)
    parts = dirichlet_partition(data, 0.1, 10, np.random.default_rng(0), min_size=2)
    assert min(len(p) for p in parts) >= 2
    with pytest.raises(InvalidParam):
        dirichlet_partition(data, 0.0, 4, np.random.default_rng(0))
    with pytest.raises(InvalidParam):
        dirichlet_partition(data, 1.0, 4, np.random.default_rng(0), min_size=30)


def test_dirichlet_quadratic_matches_item_average():
    from epidemic_learning.problems import _log_uniform_curvature

    rng = np.random.default_rng(0)
    data = make_blobs(3, 10, 2, rng)
    parts = dirichlet_partition(data, 1.0, 4, rng, min_size=1)
    state = rng.bit_generator.state
    ens = make_dirichlet_quadratic(data, parts, 2.0, 0.5, rng)
    replay = np.random.default_rng()
    replay.bit_generator.state = state
    class_curv = [_log_uniform_curvature(2, 2.0, replay) for _ in range(3)]
    assert not ens.shared_curvature
    assert ens.L <= 2.0
    x = np.array([0.4, -0.7])
    for i, p in enumerate(parts):
        brute = np.mean([0.5 * np.sum(class_curv[data.labels[j]] * (x - data.features[j]) ** 2)
                         for j in p])
        model = (0.5 * np.sum(ens.node_curvature[i] * x * x) - ens.offsets[i] @ x
                 + ens.constants[i])
        assert model == pytest.approx(brute, rel=1e-12)
    x_star, f_star = optimum(ens)
    assert global_loss(ens, x) >= f_star
    assert np.max(np.abs(global_grad(ens, x_star))) <= 1e-12


def test_csv_loader(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("f0,f1,label\n0.1,0.2,0\n1.0,2.0,2\n3.0,4.0,1\n")
    data = load_csv_dataset(path)
    assert data.classes == 3
    np.testing.assert_array_equal(data.labels, [0, 2, 1])
    assert data.items[1][1] == 2
    (tmp_path / "bad.csv").write_text("a,label\nx,0\n")
    with pytest.raises(InvalidParam):
        load_csv_dataset(tmp_path / "bad.csv")


def test_ensemble_validation():
    with pytest.raises(InvalidParam):
        QuadraticEnsemble(curvature=np.array([1.0, -1.0]), offsets=np.zeros((3, 2)), sigma=1.0)
    with pytest.raises(InvalidParam):
        QuadraticEnsemble(curvature=np.ones(3), offsets=np.zeros((3, 2)), sigma=1.0)
