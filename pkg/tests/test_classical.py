import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splinegen.classical import (
    DegenerateInputWarning,
    KnotMethod,
    ParamMethod,
    classical_fit,
    parameterize,
    place_knots,
    run_baseline,
    subsample_params,
)
from splinegen.kernel import (
    BSplineCurve,
    KnotVectorError,
    build_collocation,
    check_schoenberg_whitney,
    clamped_knots,
    eval_curve,
)

ELBOW = [[0, 0, 0], [3, 0, 0], [3, 4, 0]]
WIDE_ELBOW = [[0, 0, 0], [3, 0, 0], [6, 4, 0]]  # chords 3 and 5


def random_cubic(rng, n_ctrl=8):
    interior = np.sort(rng.uniform(0.05, 0.95, n_ctrl - 4))
    return BSplineCurve(3, clamped_knots(interior, 3), rng.random((n_ctrl, 3)))


class TestParameterize:
    def test_uniform(self):
        np.testing.assert_allclose(parameterize(np.zeros((5, 3)) + np.arange(5)[:, None], "uniform"),
                                   [0, 0.25, 0.5, 0.75, 1], atol=1e-12)

    def test_chord(self):
        np.testing.assert_allclose(parameterize(ELBOW, "chord"), [0, 3 / 7, 1], atol=1e-12)
        np.testing.assert_allclose(parameterize(WIDE_ELBOW, "chord"), [0, 0.375, 1], atol=1e-12)

    def test_centripetal(self):
        r3, r5 = math.sqrt(3), math.sqrt(5)
        np.testing.assert_allclose(parameterize(ELBOW, "centripetal"), [0, r3 / (r3 + 2), 1], atol=1e-12)
        np.testing.assert_allclose(parameterize(WIDE_ELBOW, "centripetal"), [0, r3 / (r3 + r5), 1], atol=1e-12)
        assert parameterize(WIDE_ELBOW, "centripetal")[1] == pytest.approx(0.4365, abs=1e-4)

    def test_duplicates_warn_and_repeat(self):
        with pytest.warns(DegenerateInputWarning):
            u = parameterize([[0, 0, 0], [1, 0, 0], [1, 0, 0], [2, 0, 0]], "chord")
        np.testing.assert_allclose(u, [0, 0.5, 0.5, 1])

    def test_all_coincident(self):
        with pytest.warns(DegenerateInputWarning):
            u = parameterize(np.ones((3, 3)), "centripetal")
        np.testing.assert_allclose(u, [0, 0.5, 1])

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            parameterize(ELBOW, "foley")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["chord", "centripetal", "uniform"]))
    def test_rigid_invariance_and_monotone(self, seed, method):
        rng = np.random.default_rng(seed)
        pts = rng.random((12, 3))
        moved = Rotation.random(random_state=seed).apply(pts) + rng.normal(size=3)
        u = parameterize(pts, method)
        np.testing.assert_allclose(parameterize(moved, method), u, atol=1e-12)
        assert u[0] == 0 and u[-1] == 1 and np.all(np.diff(u) >= 0)


class TestPlaceKnots:
    def test_uniform(self):
        np.testing.assert_allclose(place_knots(np.linspace(0, 1, 10), 3, 5, "uniform"),
                                   [0, 0, 0, 0, 0.5, 1, 1, 1, 1], atol=1e-12)

    def test_ktp(self):
        t = place_knots(np.arange(10) / 9, 3, 5, "ktp")
        assert t[4] == pytest.approx(4 / 9, abs=1e-12)
        assert t.size == 9

    def test_avg(self):
        t = place_knots([0, 0.25, 0.5, 0.75, 1], 3, 5, "avg")
        assert t[4] == pytest.approx(0.5, abs=1e-12)

    def test_avg_regime(self):
        with pytest.raises(KnotVectorError):
            place_knots(np.linspace(0, 1, 9), 3, 5, "avg")

    @pytest.mark.parametrize("method", ["ktp", "nktp"])
    def test_ktp_regime(self, method):
        with pytest.raises(KnotVectorError):
            place_knots(np.linspace(0, 1, 5), 3, 5, method)

    def test_unsorted(self):
        with pytest.raises(ValueError):
            place_knots([0, 0.6, 0.4, 0.8, 0.9, 1], 3, 4, "ktp")

    def test_nktp_differs_from_ktp(self):
        u = np.sort(np.random.default_rng(0).random(40))
        u[0], u[-1] = 0, 1
        assert not np.allclose(place_knots(u, 3, 8, "ktp"), place_knots(u, 3, 8, "nktp"))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(4, 12), st.sampled_from(["ktp", "nktp"]))
    def test_span_coverage(self, seed, n_ctrl, method):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2 * n_ctrl, 4 * n_ctrl + 1))
        u = np.sort(rng.random(m))
        u[0], u[-1] = 0, 1
        t = place_knots(u, 3, n_ctrl, method)
        interior = t[4:-4]
        assert t.size == n_ctrl + 4
        assert np.all((interior >= u.min()) & (interior <= u.max()))
        assert check_schoenberg_whitney(u, t, 3) == 0

    def test_avg_interpolation_well_posed(self):
        # square system: t_i < u_i < t_{i+p+1} makes the collocation matrix invertible
        rng = np.random.default_rng(1)
        for _ in range(100):
            u = np.sort(rng.random(8))
            u[0], u[-1] = 0, 1
            t = place_knots(u, 3, 8, "avg")
            assert np.all((t[1:7] < u[1:7]) & (u[1:7] < t[5:11]))
            N = build_collocation(u, t, 3, 8).toarray()
            assert np.linalg.cond(N) < 1e8


class TestBaselines:
    @pytest.mark.parametrize("pm", list(ParamMethod))
    @pytest.mark.parametrize("km", [KnotMethod.UNIFORM, KnotMethod.KTP, KnotMethod.NKTP])
    def test_collinear_exact(self, pm, km):
        pts = np.stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)], axis=1)
        assert run_baseline(pts, 1, 3, pm, km).max_error == pytest.approx(0, abs=1e-14)

    def test_chord_ktp_well_posed(self):
        rng = np.random.default_rng(2)
        c = random_cubic(rng)
        pts = eval_curve(c, np.sort(rng.random(100)))
        rep = run_baseline(pts, 3, 8, "chord", "ktp")
        assert np.isfinite([rep.max_error, rep.mse_error, rep.hausdorff]).all()
        assert rep.empty_span_count == 0 and not rep.condition_flag

    def test_aggregate_trend(self):
        # informational in the original comparison; checked here over many curves
        rng = np.random.default_rng(3)
        uni, ktp = [], []
        for _ in range(30):
            c = random_cubic(rng)
            pts = eval_curve(c, np.sort(rng.random(100)))
            uni.append(run_baseline(pts, 3, 8, "chord", "uniform").max_error)
            ktp.append(run_baseline(pts, 3, 8, "chord", "ktp").max_error)
        assert np.mean(uni) > 0 and np.mean(ktp) > 0

    def test_avg_subsampled(self):
        rng = np.random.default_rng(4)
        pts = eval_curve(random_cubic(rng), np.sort(rng.random(50)))
        with pytest.raises(KnotVectorError):
            classical_fit(pts, 3, 8, "chord", "avg")
        curve, params, rep = classical_fit(pts, 3, 8, "chord", "avg", subsample_avg=True)
        assert curve.n_ctrl == 8 and params.size == 50
        assert rep.empty_span_count == 0

    def test_subsample_params(self):
        np.testing.assert_array_equal(subsample_params(np.arange(10) / 9, 4), [0, 3 / 9, 6 / 9, 1])
