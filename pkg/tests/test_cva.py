import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sohtl.cva import (
    HankelPair,
    LagSpec,
    apply_normalizer,
    build_hankel,
    fit_cva,
    fit_normalizer,
    inv_sqrt,
    project,
    select_retained,
    transform,
)
from sohtl.dataset import SynthProfile, synth_battery
from sohtl.errors import CycleTooShort, InsufficientData, InvalidInput, ShapeError
from sohtl.sync import SynchronizedSeries, synchronize_battery


def ar1(a, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=n + 200)
    x = np.empty_like(e)
    x[0] = e[0]
    for t in range(1, len(e)):
        x[t] = a * x[t - 1] + e[t]
    return x[200:]


def elbow_oracle(alpha):
    """Independent least-squares fit of both lines, then their crossing."""
    curve = np.cumsum(alpha)
    x = np.arange(1, len(alpha) + 1, dtype=float)

    def line(xs, ys):
        A = np.column_stack([xs, np.ones_like(xs)])
        (slope, icpt), *_ = np.linalg.lstsq(A, ys, rcond=None)
        return slope, icpt

    s1, c1 = line(x[:15], curve[:15])
    s2, c2 = line(x[-5:], curve[-5:])
    if abs(s1 - s2) <= 1e-6 * max(abs(s1), abs(s2)):
        return np.nan
    return (c2 - c1) / (s1 - s2)


@pytest.fixture(scope="module")
def synth_model():
    b = synth_battery(SynthProfile(n_cycles=60, base_cycle_length=64, seed=7))
    series = synchronize_battery(b.cycles[0].voltage, b)
    hankel = build_hankel(series, LagSpec(8, 8))
    return fit_cva(hankel), hankel


class TestHankel:
    def test_hand_expansion(self):
        h = build_hankel([np.arange(6.0)], LagSpec(2, 2))
        assert h.H == 3
        assert h.past.T.tolist() == [[3, 2], [2, 1], [1, 0]]
        assert h.future.T.tolist() == [[4, 5], [3, 4], [2, 3]]

    def test_k_copies(self):
        x = np.arange(20.0)
        lag = LagSpec(3, 4)
        h = build_hankel([x] * 5, lag)
        assert h.H == 5 * (20 - 4 - 3 + 1)
        assert h.H == 70
        assert h.columns_per_cycle == (14,) * 5

    def test_exact_window(self):
        h = build_hankel([np.arange(7.0)], LagSpec(3, 4))
        assert h.H == 1
        assert h.past[:, 0].tolist() == [2, 1, 0]
        assert h.future[:, 0].tolist() == [3, 4, 5, 6]

    def test_short_cycle_carries_index(self):
        series = [SynchronizedSeries(np.arange(10.0), 1), SynchronizedSeries(np.arange(5.0), 17)]
        with pytest.raises(CycleTooShort) as exc:
            build_hankel(series, LagSpec(3, 3))
        assert exc.value.cycle_index == 17

    def test_cycle_indices_recorded(self):
        series = [SynchronizedSeries(np.arange(10.0), k) for k in (4, 9)]
        assert build_hankel(series, LagSpec(2, 2)).cycle_indices == (4, 9)

    def test_invalid_lag(self):
        with pytest.raises(InvalidInput):
            LagSpec(0, 3)


class TestNormalizer:
    def test_constant_row_is_zero(self):
        n = fit_normalizer(np.array([[1.0, 1, 1, 1]]))
        out = apply_normalizer(n, np.array([[1.0, 1, 1, 1]]))
        assert np.all(out == 0) and n.std[0] == 1e-8

    def test_sample_std(self):
        n = fit_normalizer(np.array([[0.0, 2.0]]))
        assert n.mean[0] == 1.0 and n.std[0] == pytest.approx(np.sqrt(2))
        assert apply_normalizer(n, np.array([[0.0, 2.0]]))[0] == pytest.approx([-0.70710678, 0.70710678])

    def test_apply_uses_stored_stats(self):
        n = fit_normalizer(np.array([[0.0, 2.0]]))
        assert apply_normalizer(n, np.array([[5.0, 5.0]]))[0].tolist() == pytest.approx([4 / np.sqrt(2)] * 2)

    def test_single_column(self):
        with pytest.raises(InsufficientData):
            fit_normalizer(np.ones((3, 1)))

    def test_shape_mismatch(self):
        n = fit_normalizer(np.ones((3, 4)))
        with pytest.raises(ShapeError):
            apply_normalizer(n, np.ones((2, 4)))


class TestFitCva:
    def test_white_noise_has_no_correlation(self):
        rng = np.random.default_rng(0)
        h = HankelPair(rng.normal(size=(3, 50_000)), rng.normal(size=(3, 50_000)), (50_000,))
        assert np.all(fit_cva(h, retained=1).singular_values < 0.1)

    @pytest.mark.parametrize("seed", range(5))
    def test_ar1_recovery(self, seed):
        h = build_hankel([ar1(0.8, 20_001, seed)], LagSpec(1, 1))
        assert h.H == 20_000
        alpha = fit_cva(h, retained=1).singular_values
        assert 0.77 <= alpha[0] <= 0.83

    def test_ar1_matches_pearson_correlation(self):
        # for p=f=1 the only canonical correlation is |corr(x(i-1), x(i))|
        x = ar1(-0.6, 5001, 11)
        h = build_hankel([x], LagSpec(1, 1))
        r = np.corrcoef(h.past[0], h.future[0])[0, 1]
        assert fit_cva(h, retained=1).singular_values[0] == pytest.approx(abs(r), abs=1e-12)

    def test_spectrum_sorted_and_bounded(self, synth_model):
        model, _ = synth_model
        a = model.singular_values
        assert np.all(np.diff(a) <= 0)
        assert np.all((a >= 0) & (a <= 1 + 1e-6))
        assert 1 <= model.retained_count <= model.lag.p

    def test_whitening_identity(self, synth_model):
        model, h = synth_model
        Xp = apply_normalizer(model.normalizer_past, h.past)
        S = Xp @ Xp.T / (h.H - 1)
        C = model.retained_count
        assert np.max(np.abs(model.J_c @ S @ model.J_c.T - np.eye(C))) < 1e-6

    def test_transform_matrices_reconstruct(self, synth_model):
        model, _ = synth_model
        Vc = model.V[:, : model.retained_count]
        assert np.allclose(model.J_c, Vc.T @ model.whitener, atol=1e-12)
        assert np.allclose(model.J_r, (np.eye(model.lag.p) - Vc @ Vc.T) @ model.whitener, atol=1e-12)
        assert np.allclose(model.V.T @ model.V, np.eye(model.lag.p), atol=1e-10)

    def test_sign_convention(self, synth_model):
        V = synth_model[0].V
        for k in range(V.shape[1]):
            assert V[np.argmax(np.abs(V[:, k])), k] > 0

    def test_deterministic(self, synth_model):
        model, h = synth_model
        again = fit_cva(h)
        for name in ("whitener", "singular_values", "J_c", "J_r", "V"):
            assert np.array_equal(getattr(model, name), getattr(again, name))

    def test_cv_covariance_near_identity(self, synth_model):
        model, h = synth_model
        Xp = apply_normalizer(model.normalizer_past, h.past)
        cv = project(model, Xp).cv
        assert np.max(np.abs(np.cov(cv) - np.eye(model.retained_count))) < 0.05

    def test_too_few_columns(self):
        with pytest.raises(InsufficientData):
            fit_cva(build_hankel([np.arange(10.0)], LagSpec(3, 3)))

    def test_retained_out_of_range(self, synth_model):
        with pytest.raises(InvalidInput):
            fit_cva(synth_model[1], retained=9)

    def test_inv_sqrt_floor(self):
        S = np.diag([1.0, 0.0])
        W = inv_sqrt(S)
        assert np.isfinite(W).all() and W[1, 1] == pytest.approx(1e5)


class TestSelectRetained:
    def test_knee_example_matches_analytic_intersection(self):
        alpha = [0.9, 0.8] + [0.01] * 30
        xc = elbow_oracle(np.array(alpha))
        assert xc == pytest.approx(10.6662, abs=1e-3)
        assert select_retained(alpha) == int(np.floor(xc + 0.5)) == 11

    def test_all_equal_falls_back(self):
        assert select_retained([0.5] * 30) == 27

    def test_short_spectrum_falls_back(self):
        assert select_retained([0.9, 0.05, 0.05]) == 1
        assert select_retained([0.5, 0.3, 0.2]) == 3
        assert select_retained([1.0]) == 1

    def test_empty(self):
        with pytest.raises(InvalidInput):
            select_retained([])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
    def test_result_in_range(self, values):
        alpha = sorted(values, reverse=True)
        assert 1 <= select_retained(alpha) <= len(alpha)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(1e-3, 1), min_size=20, max_size=40))
    def test_agrees_with_oracle_when_crossing_inside(self, values):
        alpha = np.array(sorted(values, reverse=True))
        xc = elbow_oracle(alpha)
        if np.isfinite(xc) and 1.01 <= xc <= len(alpha) - 0.01 and abs(xc - np.floor(xc) - 0.5) > 1e-6:
            assert select_retained(alpha) == int(np.floor(xc + 0.5))


class TestProject:
    def test_zero_input(self, synth_model):
        model, _ = synth_model
        proj = project(model, np.zeros((8, 5)))
        assert not proj.cv.any() and not proj.rv.any()
        assert proj.cv.shape == (model.retained_count, 5) and proj.rv.shape == (8, 5)

    def test_orthogonal_split(self, synth_model):
        model, _ = synth_model
        rng = np.random.default_rng(1)
        X = rng.normal(size=(8, 1000))
        proj = project(model, X)
        lhs = (proj.cv**2).sum(0) + (proj.rv**2).sum(0)
        rhs = ((model.whitener @ X) ** 2).sum(0)
        assert np.max(np.abs(lhs - rhs)) < 1e-8

    def test_row_mismatch(self, synth_model):
        with pytest.raises(ShapeError):
            project(synth_model[0], np.zeros((7, 3)))

    def test_columns_per_cycle_carried(self, synth_model):
        model, h = synth_model
        b = synth_battery(SynthProfile(n_cycles=3, base_cycle_length=64, seed=8))
        proj = transform(model, synchronize_battery(b.cycles[0].voltage, b))
        assert proj.columns_per_cycle == (64 - 15,) * 3
        assert [sl.stop - sl.start for sl in proj.cycle_slices()] == [49, 49, 49]
