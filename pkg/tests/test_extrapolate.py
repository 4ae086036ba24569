import numpy as np
import pytest

from relex.errors import (
    BadStepIndex,
    DegenerateInterval,
    DimensionMismatch,
    NotAMatrix,
    RankOutOfRange,
    TooFewPoints,
    ValidationError,
    ZeroTrajectory,
)
from relex.extrapolate import (
    ExtrapolationConfig,
    Rank1Model,
    alpharl_extrapolate,
    expo,
    extrapolate_raw,
    fit_rank1,
    fit_subspace,
    hat_weights,
    predict,
    reconstruct_rank_r,
    top_singular_triple,
    weight_extrapolate,
)
from relex.spectral import LinearFit, truncated_svd
from relex.synth import jacobi_svd_oracle
from relex.trajectory import TrajectoryMatrix, build_trajectory

from conftest import make_plant, rank1_series, write_series
from relex.synth import plant_series


def traj_of(rows, steps=None):
    return TrajectoryMatrix.from_rows(np.asarray(rows, dtype=np.float64), steps)


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


class TestFitRank1:
    def test_exact_plant(self, rng):
        v = unit(rng, 16)
        t = np.array([1.0, 2.0, 3.0])
        m = fit_rank1(traj_of(np.outer(2 * t + 1, -v)))
        assert m.fit.a == pytest.approx(2.0, rel=1e-12)
        assert m.fit.b == pytest.approx(1.0, rel=1e-12)
        assert m.fit.r_squared == 1.0
        # planted along -v; orientation makes a >= 0, so v1 = -v
        np.testing.assert_allclose(m.v1, -v, atol=1e-14)

    def test_uses_true_steps(self, rng):
        v = unit(rng, 8)
        steps = [10, 20, 40, 80]
        m = fit_rank1(traj_of(np.outer([0.5 * s + 3 for s in steps], v), steps))
        assert m.fit.a == pytest.approx(0.5, rel=1e-12)
        assert m.fit.b == pytest.approx(3.0, rel=1e-12)

    def test_alternating_zero_slope(self, rng):
        v = unit(rng, 8)
        m = fit_rank1(traj_of(np.outer([1, -1, 1], v)))
        assert m.fit.a == pytest.approx(0.0, abs=1e-14)
        assert m.coefficients[-1] > 0

    def test_orthogonal_noise_1pct(self, rng):
        d, t = 2000, np.arange(1.0, 21.0)
        v = unit(rng, d)
        c = 0.3 * t + 2
        rho = np.sqrt(np.mean(c ** 2))
        noise = rng.standard_normal((t.size, d)) * (0.01 * rho / np.sqrt(d))
        noise -= np.outer(noise @ v, v)
        m = fit_rank1(traj_of(np.outer(c, v) + noise, t))
        assert abs(np.dot(m.v1, v)) >= 0.999
        assert m.fit.a == pytest.approx(0.3, rel=0.02)

    def test_errors(self):
        with pytest.raises(TooFewPoints):
            fit_rank1(traj_of([[1.0, 2.0]]))
        with pytest.raises(ZeroTrajectory):
            fit_rank1(traj_of(np.zeros((3, 4))))


class TestPredict:
    def test_formula(self):
        m = Rank1Model("w", np.array([1.0, 0.0, 0.0]), 1.0, LinearFit(2.0, 0.0, 1.0), (1, 2), np.array([2.0, 4.0]))
        np.testing.assert_array_equal(predict(m, np.zeros(3), 10), [20.0, 0.0, 0.0])

    def test_interpolation_consistency(self, rng):
        v, base = unit(rng, 32), rng.standard_normal(32)
        t = np.arange(1.0, 6.0)
        M = np.outer(3 * t - 1, v)
        m = fit_rank1(traj_of(M, t))
        for i, s in enumerate(t):
            want = base + M[i]
            np.testing.assert_allclose(predict(m, base, s), want, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(
                predict(m, base, s), reconstruct_rank_r(traj_of(M, t), base, 1, i), rtol=1e-12, atol=1e-13)

    def test_far_extension(self, rng):
        v, base = unit(rng, 32), rng.standard_normal(32)
        t = np.arange(1.0, 11.0)
        m = fit_rank1(traj_of(np.outer(0.7 * t + 0.2, v), t))
        for T in (20, 100):
            want = base + (0.7 * T + 0.2) * v
            assert np.linalg.norm(predict(m, base, T) - want) <= 1e-9 * np.linalg.norm(want)

    def test_sign_invariance(self, rng):
        v, base = unit(rng, 16), rng.standard_normal(16)
        m = fit_rank1(traj_of(np.outer([1.0, 3.0, 4.0], v)))
        flipped = Rank1Model(m.tensor_name, -m.v1, m.sigma1, LinearFit(-m.fit.a, -m.fit.b, m.fit.r_squared),
                             m.steps, -m.coefficients)
        np.testing.assert_array_equal(predict(m, base, 17), predict(flipped, base, 17))

    def test_errors(self):
        m = Rank1Model("w", np.ones(3) / np.sqrt(3), 1.0, LinearFit(1.0, 0.0, 1.0), (1, 2), np.ones(2))
        with pytest.raises(DimensionMismatch):
            predict(m, np.zeros(4), 5)
        with pytest.raises(ValidationError):
            predict(m, np.zeros(3), 0)

    def test_model_save_load(self, tmp_path, rng):
        m = fit_rank1(traj_of(rng.standard_normal((4, 9)), [3, 5, 8, 13]))
        path = m.save(tmp_path / "models")
        raw = np.fromfile(path, dtype="<f8")
        assert raw[0] == 4 and raw[1] == 9
        np.testing.assert_array_equal(raw[2:6], [3, 5, 8, 13])
        back = Rank1Model.load(path)
        np.testing.assert_array_equal(back.v1, m.v1)
        assert back.fit == m.fit and back.steps == m.steps and back.sigma1 == m.sigma1
        np.testing.assert_array_equal(predict(back, np.zeros(9), 40), predict(m, np.zeros(9), 40))

    def test_predict_chunks(self, rng):
        m = fit_rank1(traj_of(rng.standard_normal((3, 10))))
        base = rng.standard_normal(10)
        got = np.concatenate(list(m.predict_chunks([base[:4], base[4:]], 9)))
        np.testing.assert_array_equal(got, predict(m, base, 9))


class TestReconstruct:
    def test_rank1_exact(self, rng):
        v, base = unit(rng, 20), rng.standard_normal(20)
        M = np.outer([1.0, 2.5, 4.0], v)
        for i in range(3):
            got = reconstruct_rank_r(traj_of(M), base, 1, i)
            assert np.linalg.norm(got - (base + M[i])) <= 1e-10 * np.linalg.norm(base + M[i])

    def test_full_rank_identity(self, rng):
        M, base = rng.standard_normal((5, 12)), rng.standard_normal(12)
        for i in range(5):
            got = reconstruct_rank_r(traj_of(M), base, 5, i)
            assert np.linalg.norm(got - (base + M[i])) <= 1e-8 * np.linalg.norm(base + M[i])

    def test_error_matches_tail_energy(self, rng):
        M = rng.standard_normal((4, 32))
        s = jacobi_svd_oracle(M).singular_values
        prev = np.inf
        for r in (1, 2, 3):
            dec = truncated_svd(traj_of(M), r)
            err = sum(np.sum((reconstruct_rank_r(traj_of(M), np.zeros(32), r, i, dec) - M[i]) ** 2)
                      for i in range(4))
            assert err == pytest.approx(np.sum(s[r:] ** 2), rel=1e-8)
            assert err <= prev
            prev = err

    def test_errors(self, rng):
        t = traj_of(rng.standard_normal((3, 4)))
        with pytest.raises(RankOutOfRange):
            reconstruct_rank_r(t, np.zeros(4), 4, 0)
        with pytest.raises(BadStepIndex):
            reconstruct_rank_r(t, np.zeros(4), 1, 3)


class TestRaw:
    def test_hat_weights_match_polyfit(self, rng):
        steps = np.array([2.0, 3.0, 5.0, 7.0, 11.0, 13.0])
        y = rng.standard_normal(6)
        for kind, order in (("linear", 1), ("poly3", 3)):
            want = np.polyval(np.polyfit(steps, y, order), 20.0)
            assert hat_weights(steps, 20.0, kind) @ y == pytest.approx(want, rel=1e-9)

    def test_exact_lines(self, rng):
        a, b, base = rng.standard_normal(10), rng.standard_normal(10), rng.standard_normal(10)
        t = np.arange(1.0, 6.0)
        M = np.outer(t, a) + b
        np.testing.assert_allclose(extrapolate_raw(traj_of(M, t), base, 12), base + 12 * a + b, rtol=1e-12)

    def test_agrees_with_svd_on_rank1(self, rng):
        v, base = unit(rng, 24), rng.standard_normal(24)
        t = np.arange(1.0, 8.0)
        T = traj_of(np.outer(1.5 * t + 0.5, v), t)
        np.testing.assert_allclose(extrapolate_raw(T, base, 30), predict(fit_rank1(T), base, 30),
                                   rtol=1e-9, atol=1e-12)

    def test_raw_worse_under_orthogonal_noise(self, rng):
        d, t = 500, np.arange(1.0, 11.0)
        v = unit(rng, d)
        c = t + 1.0
        noise = rng.standard_normal((10, d)) * 0.1 * np.sqrt(np.mean(c ** 2)) / np.sqrt(d)
        noise -= np.outer(noise @ v, v)
        T = traj_of(np.outer(c, v) + noise, t)
        truth = 21.0 * v
        err_svd = np.linalg.norm(predict(fit_rank1(T), np.zeros(d), 20) - truth)
        err_raw = np.linalg.norm(extrapolate_raw(T, np.zeros(d), 20) - truth)
        assert err_raw >= err_svd

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            extrapolate_raw(traj_of([[1.0]]), np.zeros(1), 3)


class TestSubspace:
    def test_rank_r_linear_on_exact_data(self, rng):
        t = np.arange(1.0, 9.0)
        V = np.linalg.qr(rng.standard_normal((30, 2)))[0].T
        C = np.stack([2 * t + 1, 0.5 * t - 3], axis=1)
        model = fit_subspace(traj_of(C @ V, t), rank=2)
        np.testing.assert_allclose(model.predict(np.zeros(30), 20), np.array([41.0, 7.0]) @ V, atol=1e-10)

    def test_poly_fit_kind(self, rng):
        t = np.arange(1.0, 9.0)
        v = unit(rng, 12)
        model = fit_subspace(traj_of(np.outer(0.1 * t ** 3 + t, v), t), rank=1, fit_kind="poly3")
        np.testing.assert_allclose(model.predict(np.zeros(12), 12), (0.1 * 12 ** 3 + 12) * v, rtol=1e-8)


class TestBaselines:
    def test_expo(self):
        assert expo([0.0], [1.0], 0.5)[0] == 1.5
        x0, xc = np.array([0.3, -1.2]), np.array([0.7, 2.0])
        np.testing.assert_array_equal(expo(x0, xc, 0.0), xc)
        np.testing.assert_array_equal(expo(x0, xc, -1.0), x0)
        with pytest.raises(DimensionMismatch):
            expo(np.zeros(2), np.zeros(3), 1.0)

    def test_weight_extrapolate(self):
        assert weight_extrapolate([1.0], [2.0], 10, 20, 30)[0] == 3.0
        a, b = np.array([0.1, 0.2]), np.array([0.3, -0.7])
        np.testing.assert_array_equal(weight_extrapolate(a, b, 5, 9, 9), b)
        np.testing.assert_array_equal(weight_extrapolate(a, b, 5, 9, 5), a)
        with pytest.raises(DegenerateInterval):
            weight_extrapolate(a, b, 5, 5, 9)

    def test_two_point_agreement(self, rng):
        v, base = unit(rng, 16), rng.standard_normal(16)
        steps = [4, 9]
        M = np.outer([0.8 * s for s in steps], v)     # line through the base
        T, traj = 25, traj_of(M, steps)
        a = predict(fit_rank1(traj), base, T)
        b = extrapolate_raw(traj, base, T)
        c = weight_extrapolate(base + M[0], base + M[1], steps[0], steps[1], T)
        for x in (b, c):
            assert np.linalg.norm(x - a) <= 1e-9 * np.linalg.norm(a)


class TestAlphaRL:
    def test_power_iteration(self, rng):
        D = rng.standard_normal((7, 5))
        sigma, u, v = top_singular_triple(D)
        assert sigma == pytest.approx(np.linalg.svd(D, compute_uv=False)[0], rel=1e-9)
        np.testing.assert_allclose(D @ v, sigma * u, atol=1e-8)
        with pytest.raises(NotAMatrix):
            top_singular_triple(np.ones(3))

    def test_exact_one_factor(self, tmp_path, rng):
        # dyadic values: every stored float32 is exact, so deltas are exactly rank 1
        u = rng.integers(-8, 9, 6) / 8.0
        v = rng.integers(-8, 9, 5) / 4.0
        base = rng.integers(-16, 17, 30) / 16.0
        steps = [1, 2, 3, 4]
        tensors = {t: {"m": base + t * np.outer(u, v).ravel()} for t in steps}
        s = write_series(tmp_path, {"m": base}, tensors, shapes={"m": (6, 5)})
        want = s.read_tensor(4, "m")
        got = alpharl_extrapolate(s, "m", 4)
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)
        # progress target / t_cut extends the same line
        got8 = alpharl_extrapolate(s, "m", 4, 8)
        want8 = base + 8 * np.outer(u, v).ravel()
        assert np.linalg.norm(got8 - want8) <= 1e-8 * np.linalg.norm(want8)

    def test_single_step(self, tmp_path):
        s = write_series(tmp_path, {"m": np.zeros(4)}, {1: {"m": np.ones(4)}}, shapes={"m": (2, 2)})
        with pytest.raises(TooFewPoints):
            alpharl_extrapolate(s, "m", 1)

    def test_not_a_matrix(self, tmp_path):
        s = write_series(tmp_path, {"b": np.zeros(4)}, {1: {"b": np.ones(4)}, 2: {"b": 2 * np.ones(4)}})
        with pytest.raises(NotAMatrix):
            alpharl_extrapolate(s, "b", 2)

    def test_rotating_noise_worse_than_rank1(self, tmp_path):
        cfg = make_plant(tensors=[{"name": "m", "shape": [24, 20]}], t_values=list(range(1, 11)),
                         slope=1.0, intercept=0.5, noise_kind="full_iid", noise_scale=0.3, rng_seed=5)
        s, truth = plant_series(cfg, tmp_path / "p")
        base = s.read_tensor(0, "m")
        target = truth.analytic_checkpoint(s, "m", 10)
        relex_err = np.linalg.norm(predict(fit_rank1(build_trajectory(s, "m", 10)), base, 10) - target)
        alpha_err = np.linalg.norm(alpharl_extrapolate(s, "m", 10) - target)
        assert alpha_err > relex_err


def test_config_validation():
    with pytest.raises(ValidationError):
        ExtrapolationConfig(10, [20], rank=0)
    with pytest.raises(ValidationError):
        ExtrapolationConfig(10, [0])
    with pytest.raises(ValidationError):
        ExtrapolationConfig(10, [20], space="weights")
    assert ExtrapolationConfig(10, [20, 30]).rank == 1


def test_rank1_series_helper_round_trip(tmp_path, rng):
    v = unit(rng, 12)
    s = rank1_series(tmp_path, v, [1.0, 2.0, 3.0])
    m = fit_rank1(build_trajectory(s, "w", 3))
    assert m.fit.r_squared == pytest.approx(1.0, abs=1e-12)
