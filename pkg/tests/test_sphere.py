import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import basis, unit_rows
from ese.sphere import (
    AntipodalError,
    KarcherConfig,
    KarcherDegeneracyError,
    SphereError,
    exp_map,
    geodesic_distance,
    karcher_mean,
    karcher_mean_rows,
    log_map,
)
from ese.synthetic import random_orthogonal


def frechet_oracle(points, iters=20000, step=0.05):
    """Minimize sum_n arccos(mu . x_n)^2 over unit mu by projected Euclidean gradient descent.

    Uses only dot products and the derivative of arccos, not the log/exp maps.
    """
    x = np.asarray(points, dtype=np.float64)
    mu = x.sum(axis=0)
    mu /= np.linalg.norm(mu)
    for _ in range(iters):
        c = np.clip(x @ mu, -1 + 1e-15, 1 - 1e-15)
        theta = np.arccos(c)
        grad = (-2.0 * theta / np.sqrt(1.0 - c * c)) @ x
        grad -= (grad @ mu) * mu
        if np.linalg.norm(grad) < 1e-14:
            break
        mu = mu - step * grad / len(x)
        mu /= np.linalg.norm(mu)
    return mu


def spherical_cluster(rng, m, d, spread):
    centre = unit_rows(rng, 1, d)[0]
    pts = centre + spread * rng.standard_normal((m, d))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def max_pairwise(points):
    c = np.clip(points @ points.T, -1, 1)
    return float(np.max(np.arccos(c)))


# ---------------------------------------------------------------------------
# geodesic distance


def test_geodesic_identical_points():
    assert geodesic_distance(basis(3, 0), basis(3, 0)) == 0.0


def test_geodesic_antipodal_points():
    assert geodesic_distance(basis(3, 0), -basis(3, 0)) == math.pi


def test_geodesic_orthogonal_basis():
    assert geodesic_distance(basis(4, 0), basis(4, 1)) == pytest.approx(math.pi / 2, abs=1e-15)


def test_geodesic_rejects_dimension_mismatch():
    with pytest.raises(SphereError, match="dimension mismatch"):
        geodesic_distance(basis(3, 0), basis(4, 0))


def test_geodesic_rejects_non_unit():
    with pytest.raises(SphereError, match="unit norm"):
        geodesic_distance(np.array([1.0, 0.001, 0.0]) * 1.01, basis(3, 0))


def test_geodesic_tolerates_tiny_norm_drift():
    u = basis(3, 0) * (1 + 5e-5)
    # the overshooting dot is clamped to 1 - 1e-12, so the floor is arccos of that
    assert geodesic_distance(u, basis(3, 0)) == pytest.approx(math.acos(1 - 1e-12), rel=1e-3)


def test_geodesic_metric_on_seeded_triples():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        u, v, w = unit_rows(rng, 3, 5)
        duv, dvu = geodesic_distance(u, v), geodesic_distance(v, u)
        assert duv == dvu
        assert 0.0 <= duv <= math.pi
        assert geodesic_distance(u, w) <= duv + geodesic_distance(v, w) + 1e-9


# ---------------------------------------------------------------------------
# log / exp


def test_log_map_same_point_is_zero():
    p = unit_rows(np.random.default_rng(1), 1, 6)[0]
    assert np.array_equal(log_map(p, p), np.zeros(6))


def test_log_map_quarter_circle():
    t = log_map(basis(3, 0), basis(3, 1))
    np.testing.assert_allclose(t, [0.0, math.pi / 2, 0.0], atol=1e-15)


def test_log_map_antipodal_raises():
    with pytest.raises(AntipodalError, match="undefined tangent direction"):
        log_map(basis(3, 0), -basis(3, 0))


def test_log_map_norm_matches_geodesic_and_is_tangent():
    rng = np.random.default_rng(2)
    for _ in range(100):
        u, v = unit_rows(rng, 2, 7)
        t = log_map(u, v)
        assert abs(np.linalg.norm(t) - geodesic_distance(u, v)) < 1e-12
        assert abs(np.dot(t, u)) < 1e-8


def test_exp_map_zero_tangent_returns_base():
    p = unit_rows(np.random.default_rng(3), 1, 4)[0]
    assert np.array_equal(exp_map(p, np.zeros(4)), p)


def test_exp_map_inverts_quarter_circle():
    np.testing.assert_allclose(exp_map(basis(3, 0), [0.0, math.pi / 2, 0.0]), basis(3, 1), atol=1e-15)


def test_exp_log_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        u, v = unit_rows(rng, 2, 8)
        np.testing.assert_allclose(exp_map(u, log_map(u, v)), v, atol=1e-8)


def test_exp_map_rejects_non_tangent():
    with pytest.raises(SphereError, match="not orthogonal"):
        exp_map(basis(3, 0), [0.1, 0.2, 0.0])


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.1))
def test_exp_map_output_is_unit(seed, length):
    rng = np.random.default_rng(seed)
    base = unit_rows(rng, 1, 5)[0]
    t = rng.standard_normal(5)
    t -= t.dot(base) * base
    t *= length / np.linalg.norm(t)
    assert abs(np.linalg.norm(exp_map(base, t)) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# Karcher mean


def test_karcher_idempotent():
    v = unit_rows(np.random.default_rng(5), 1, 8)[0]
    res = karcher_mean([v, v, v])
    assert np.array_equal(res.mean, v)
    assert res.converged


def test_karcher_symmetric_pair_midpoint():
    res = karcher_mean([basis(4, 0), basis(4, 1)])
    np.testing.assert_allclose(res.mean, [2**-0.5, 2**-0.5, 0, 0], atol=1e-6)


def test_karcher_matches_frechet_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        pts = unit_rows(rng, 3, 8)
        oracle = frechet_oracle(pts)
        assert np.max(np.abs(karcher_mean(pts).mean - oracle)) < 1e-5


def test_frechet_oracle_is_a_minimum():
    # sanity of the oracle itself: perturbing it never lowers the objective
    rng = np.random.default_rng(7)
    pts = unit_rows(rng, 3, 8)
    mu = frechet_oracle(pts)

    def objective(m):
        return float(np.sum(np.arccos(np.clip(pts @ m, -1, 1)) ** 2))

    for _ in range(50):
        nudged = mu + 1e-4 * rng.standard_normal(8)
        assert objective(nudged / np.linalg.norm(nudged)) >= objective(mu) - 1e-12


def test_karcher_permutation_invariant():
    rng = np.random.default_rng(8)
    for _ in range(50):
        pts = spherical_cluster(rng, 6, 5, 0.5)
        ref = karcher_mean(pts).mean
        for _ in range(3):
            perm = karcher_mean(pts[rng.permutation(6)]).mean
            assert np.max(np.abs(perm - ref)) < 1e-9


def test_karcher_rotational_equivariance():
    rng = np.random.default_rng(9)
    for k in range(50):
        pts = spherical_cluster(rng, 5, 8, 0.4)
        q = random_orthogonal(8, 1000 + k)
        lhs = karcher_mean(pts @ q.T).mean
        rhs = q @ karcher_mean(pts).mean
        assert np.max(np.abs(lhs - rhs)) < 1e-7


def test_karcher_converges_within_50_iterations_on_1000_clusters():
    rng = np.random.default_rng(10)
    cfg = KarcherConfig(tolerance=1e-8)
    checked = 0
    while checked < 1000:
        pts = spherical_cluster(rng, int(rng.integers(2, 8)), int(rng.integers(2, 10)), 0.3)
        if max_pairwise(pts) >= math.pi / 2:
            continue
        res = karcher_mean(pts, cfg)
        assert res.converged and res.iterations <= 50
        checked += 1


def test_karcher_empty_raises():
    with pytest.raises(SphereError, match="nonempty"):
        karcher_mean(np.zeros((0, 3)))


def test_karcher_balanced_antipodes_raise_with_iteration():
    with pytest.raises(KarcherDegeneracyError) as info:
        karcher_mean([basis(3, 0), -basis(3, 0)])
    assert info.value.iteration == 0


def test_karcher_non_convergence_is_flagged():
    rng = np.random.default_rng(11)
    pts = spherical_cluster(rng, 6, 5, 1.0)
    res = karcher_mean(pts, KarcherConfig(tolerance=1e-15, max_iterations=1))
    assert not res.converged
    assert res.iterations == 1
    assert abs(np.linalg.norm(res.mean) - 1) < 1e-12


def test_karcher_config_validation():
    with pytest.raises(ValueError):
        KarcherConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        KarcherConfig(max_iterations=0)


def test_karcher_rows_matches_scalar_version():
    rng = np.random.default_rng(12)
    stack = np.stack([spherical_cluster(rng, 5, 8, 0.5) for _ in range(40)])
    means, iters = karcher_mean_rows(stack)
    for row, m, it in zip(stack, means, iters):
        ref = karcher_mean(row)
        assert np.max(np.abs(m - ref.mean)) < 1e-8
        assert it <= 50


def test_karcher_rows_reports_degenerate_row():
    stack = np.stack([np.stack([basis(3, 0), basis(3, 1)]), np.stack([basis(3, 2), -basis(3, 2)])])
    with pytest.raises(KarcherDegeneracyError) as info:
        karcher_mean_rows(stack)
    assert info.value.row == 1
