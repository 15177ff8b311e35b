import json

import numpy as np
import pytest

from splinegen.dataset import (
    CurveRecord,
    DatasetFormatError,
    GenConfig,
    denormalize,
    generate_curve,
    generate_dataset,
    generate_record,
    is_self_intersecting,
    normalize,
    read_dataset,
    sample_points,
    shuffle_record,
    train_val_split,
    write_dataset,
)
from splinegen.kernel import BSplineCurve, clamped_knots, eval_curve

CFG = GenConfig()


def test_generate_curve_deterministic():
    a, b = generate_curve(CFG, 11), generate_curve(CFG, 11)
    np.testing.assert_array_equal(a.knots, b.knots)
    np.testing.assert_array_equal(a.control_points, b.control_points)


def test_generated_curves_valid():
    for seed in range(50):
        c = generate_curve(GenConfig(knot_distribution="beta" if seed % 2 else "uniform"), seed)
        assert c.degree == 3 and 5 <= c.n_ctrl <= 10
        assert c.control_points.min() >= 0 and c.control_points.max() <= 1 + 1e-12


def test_rejection_rate_reported():
    _, stats = generate_dataset(CFG, 100, seed=1, with_stats=True)
    assert stats["accepted"] == 100 and stats["rejected"] >= 0


class TestSelfIntersection:
    def test_line(self):
        c = BSplineCurve(3, clamped_knots([], 3), [[0, 0, 0], [1 / 3, 0, 0], [2 / 3, 0, 0], [1, 0, 0]])
        assert not is_self_intersecting(c)

    def test_figure_eight(self):
        # control polygon forces the planar curve to cross itself near the middle
        ctrl = [[0, 0, 0], [1, 1, 0], [1, 0, 0], [0, 1, 0]]
        c = BSplineCurve(3, clamped_knots([], 3), ctrl)
        pts = eval_curve(c, np.linspace(0, 1, 2001))
        # brute-force: some non-adjacent polyline vertices come very close
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        idx = np.arange(len(pts))
        d[np.abs(idx[:, None] - idx[None]) < 50] = np.inf
        assert d.min() < 1e-3
        assert is_self_intersecting(c)

    def test_arc(self):
        theta = np.linspace(0, 1.5 * np.pi, 8)
        ctrl = np.stack([np.cos(theta), np.sin(theta), np.zeros(8)], axis=1)
        c = BSplineCurve(3, clamped_knots(np.linspace(0, 1, 6)[1:-1], 3), normalize(ctrl)[0])
        assert not is_self_intersecting(c)


class TestNormalize:
    def test_unit_cube_identity(self):
        pts = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.2, 0.1]])
        out, (scale, shift) = normalize(pts)
        assert scale == 1.0
        np.testing.assert_array_equal(shift, 0)
        np.testing.assert_array_equal(out, pts)

    def test_symmetric_box(self):
        out, (scale, shift) = normalize(np.array([[-1, -1, -1], [1, 1, 1]]))
        assert scale == 0.5
        np.testing.assert_array_equal(shift, 0.5)

    def test_round_trip(self):
        pts = np.random.default_rng(0).normal(size=(30, 3)) * 7
        out, tf = normalize(pts)
        np.testing.assert_allclose(denormalize(out, tf), pts, atol=1e-12)

    def test_isotropic(self):
        out, _ = normalize(np.array([[0, 0, 0], [4, 2, 1]]))
        np.testing.assert_allclose(out[1], [1, 0.5, 0.25])


class TestSampling:
    def test_deterministic(self):
        c = generate_curve(CFG, 0)
        a = sample_points(c, 50, "random", 3)
        b = sample_points(c, 50, "random", 3)
        np.testing.assert_array_equal(a[0], b[0])

    def test_equispaced(self):
        u, _ = sample_points(generate_curve(CFG, 0), 5, "equispaced")
        np.testing.assert_array_equal(u, np.arange(5) / 4)

    def test_on_curve(self):
        c = generate_curve(CFG, 0)
        u, pts = sample_points(c, 40, "random", 1)
        np.testing.assert_allclose(pts, eval_curve(c, u), atol=1e-12)


class TestRecords:
    def test_invariants(self):
        rec, _ = generate_record(CFG, 5)
        m = rec.samples.shape[0]
        assert 60 <= m <= 120
        assert np.array_equal(np.sort(rec.gt_order), np.arange(m))
        assert np.all(np.diff(rec.gt_params) >= 0)
        np.testing.assert_allclose(rec.samples, eval_curve(rec.curve, rec.sample_params), atol=1e-12)
        np.testing.assert_allclose(rec.ordered_points, eval_curve(rec.curve, rec.gt_params), atol=1e-12)

    def test_double_shuffle(self):
        rec, _ = generate_record(CFG, 6)
        twice = shuffle_record(shuffle_record(rec, 1), 2)
        np.testing.assert_array_equal(twice.ordered_points, rec.ordered_points)
        np.testing.assert_allclose(twice.samples, eval_curve(rec.curve, twice.sample_params), atol=1e-12)

    def test_sort_by_params_recovers_order(self):
        rec, _ = generate_record(CFG, 7)
        order = np.argsort(rec.sample_params, kind="stable")
        np.testing.assert_array_equal(rec.samples[order], rec.ordered_points)


class TestIO:
    def test_round_trip(self, tmp_path):
        recs = generate_dataset(CFG, 5, seed=2)
        path = tmp_path / "d.jsonl"
        write_dataset(path, recs)
        back = read_dataset(path)
        assert len(back) == 5
        for a, b in zip(recs, back):
            assert a.to_dict() == b.to_dict()

    def test_schema(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, generate_dataset(CFG, 1, seed=2))
        row = json.loads(path.read_text().splitlines()[0])
        assert set(row) == {"seed", "degree", "knots", "control_points", "params", "points", "order"}

    def test_byte_identical(self, tmp_path):
        write_dataset(tmp_path / "a.jsonl", generate_dataset(CFG, 4, seed=9))
        write_dataset(tmp_path / "b.jsonl", generate_dataset(CFG, 4, seed=9))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_empty(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert read_dataset(tmp_path / "e.jsonl") == []

    def test_corrupt_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_dataset(path, generate_dataset(CFG, 2, seed=2))
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            read_dataset(path)


def test_split():
    recs = list(range(100))
    a, b = train_val_split(recs, 0.8, seed=4)
    assert len(a) == 80 and len(b) == 20
    assert not set(a) & set(b)
    assert (a, b) == train_val_split(recs, 0.8, seed=4)


@pytest.mark.parametrize("kw", [{"degree": 1}, {"ctrl_range": (3, 10)}, {"sample_range": (5, 4)},
                                {"ctrl_range": (5, 10), "sample_range": (6, 9)}])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        GenConfig(**kw)
