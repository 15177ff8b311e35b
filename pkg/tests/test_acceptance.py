"""Acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line.  Criteria 7-9 share a
session fixture that trains the toy model and its three ablations once
(roughly half an hour on one CPU core).
"""
import csv
import io
import math
import time
import warnings

import numpy as np
import pytest
import torch
from scipy.interpolate import BSpline

from splinegen.classical import classical_fit, parameterize, place_knots
from splinegen.cli import bench_rows, csv_text, BENCH_COLUMNS
from splinegen.dataset import GenConfig, generate_dataset, train_val_split
from splinegen.gradcheck import format_table, run_all
from splinegen.kernel import (
    BSplineCurve,
    IllConditionedWarning,
    basis_functions,
    check_schoenberg_whitney,
    clamped_knots,
    eval_curve,
    hausdorff,
    least_squares_fit,
    validate_knots,
)
from splinegen.model import Example, ModelConfig, SplineGen, TrainConfig, train
from splinegen.pinn import FinetuneConfig, pinn_finetune

VARIANTS = {
    "full": ({}, {}),
    "no_cross_attention": ({"cross_attention": False}, {}),
    "no_shared_encoder": ({"shared_encoder": False}, {}),
    "no_masking": ({}, {"masking": False}),
}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def random_knots(rng, p, max_interior=8):
    """Clamped vector whose interior knots may repeat up to ``p`` times."""
    interior = list(rng.random(int(rng.integers(0, max_interior + 1))))
    if interior and p > 1 and rng.random() < 0.3:
        interior += [interior[0]] * int(rng.integers(1, p))
    return clamped_knots(np.sort(interior), p)


def dense_collocation(u, t, p):
    return BSpline.design_matrix(np.asarray(u, float), t, p).toarray()


def test_criterion_1_basis(capsys):
    rng = np.random.default_rng(1)
    worst_sum, negative, support_bad, oracle_err = 0.0, 0, 0, 0.0
    elapsed = 0.0  # the scipy oracle is excluded from the timing
    for _ in range(10_000):
        p = int(rng.integers(1, 6))
        t = random_knots(rng, p)
        u = float(rng.choice([rng.random(), 0.0, 1.0, t[p + 1]], p=[0.85, 0.05, 0.05, 0.05]))
        start = time.perf_counter()
        vals, first = basis_functions(t, p, u)
        span = first + p
        worst_sum = max(worst_sum, abs(vals.sum() - 1.0))
        negative += int((vals < 0).any())
        in_span = t[span] <= u and (u < t[span + 1] or u == t[-1])
        in_support = all(t[first + k] <= u <= t[first + k + p + 1] for k in range(p + 1) if vals[k] != 0)
        support_bad += int(not (in_span and in_support))
        elapsed += time.perf_counter() - start
        row = dense_collocation([u], t, p)[0]
        outside = np.delete(row, np.arange(first, first + p + 1))
        oracle_err = max(oracle_err, np.abs(row[first: first + p + 1] - vals).max(), np.abs(outside).max(initial=0))
    ok = worst_sum <= 1e-12 and negative == 0 and support_bad == 0 and oracle_err <= 1e-12 and elapsed < 5
    report(capsys, 1, ok, f"|sum-1|={worst_sum:.1e} negative={negative} support_violations={support_bad} "
                          f"oracle_err={oracle_err:.1e} time={elapsed:.2f}s")


def test_criterion_2_fit_oracle(capsys):
    rng = np.random.default_rng(2)
    worst_fit, worst_oracle, dense_cases = 0.0, 0.0, 0
    start = time.perf_counter()
    for _ in range(200):
        n_ctrl = int(rng.integers(4, 13))
        # keep knots apart so every span is populated
        interior = np.sort(rng.uniform(0.05, 0.95, n_ctrl - 4))
        while interior.size > 1 and np.diff(interior).min() < 0.03:
            interior = np.sort(rng.uniform(0.05, 0.95, n_ctrl - 4))
        t = clamped_knots(interior, 3)
        curve = BSplineCurve(3, t, rng.uniform(-1, 1, (n_ctrl, 3)))
        # jittered grid: one parameter per 0.01-wide cell
        u = np.concatenate([[0.0], (np.arange(98) + rng.random(98)) / 98, [1.0]])
        assert check_schoenberg_whitney(u, t, 3) == 0
        _, rep = least_squares_fit(eval_curve(curve, u), u, t, 3)
        worst_fit = max(worst_fit, rep.max_error)
        if n_ctrl <= 8:
            noisy = eval_curve(curve, u) + 0.01 * rng.standard_normal((u.size, 3))
            fit, _ = least_squares_fit(noisy, u, t, 3)
            ref = np.linalg.lstsq(dense_collocation(u, t, 3), noisy, rcond=None)[0]
            worst_oracle = max(worst_oracle, np.abs(fit.control_points - ref).max())
            dense_cases += 1
    elapsed = time.perf_counter() - start
    ok = worst_fit <= 1e-8 and worst_oracle <= 1e-10 and elapsed < 30
    report(capsys, 2, ok, f"max_error={worst_fit:.1e} dense_oracle_diff={worst_oracle:.1e} "
                          f"({dense_cases} dense cases) time={elapsed:.2f}s")


def test_criterion_3_classical(capsys):
    r3, r5 = math.sqrt(3), math.sqrt(5)
    elbow = [[0, 0, 0], [3, 0, 0], [3, 4, 0]]
    wide = [[0, 0, 0], [3, 0, 0], [6, 4, 0]]
    hand = [
        (parameterize(elbow, "uniform")[1], 0.5),
        (parameterize(elbow, "chord")[1], 3 / 7),
        (parameterize(elbow, "centripetal")[1], r3 / (r3 + 2)),
        (parameterize(wide, "chord")[1], 0.375),
        (parameterize(wide, "centripetal")[1], r3 / (r3 + r5)),
    ]
    hand += list(zip(place_knots(np.linspace(0, 1, 10), 3, 5, "uniform"), [0, 0, 0, 0, 0.5, 1, 1, 1, 1]))
    hand.append((place_knots(np.arange(10) / 9, 3, 5, "ktp")[4], 4 / 9))
    hand.append((place_knots([0, 0.25, 0.5, 0.75, 1], 3, 5, "avg")[4], 0.5))
    hand_err = max(abs(a - b) for a, b in hand)

    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(500):
        n_ctrl = int(rng.integers(4, 16))
        m = int(rng.integers(2 * n_ctrl, 6 * n_ctrl + 1))
        u = np.sort(rng.random(m))
        u[0], u[-1] = 0.0, 1.0
        t = place_knots(u, 3, n_ctrl, "nktp")
        validate_knots(t, 3)
        bad += int(t.size != n_ctrl + 4 or check_schoenberg_whitney(u, t, 3) != 0)
    ok = hand_err <= 1e-12 and bad == 0
    report(capsys, 3, ok, f"hand_examples={len(hand)} max_diff={hand_err:.1e} nktp_failures={bad}/500")


def test_criterion_4_metrics(capsys):
    rng = np.random.default_rng(4)
    worst_gap, perfect = -math.inf, 0.0
    methods = [(pm, km) for pm in ("uniform", "chord", "centripetal") for km in ("uniform", "ktp", "nktp")]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        for k in range(500):
            n_ctrl = int(rng.integers(4, 10))
            pts = np.cumsum(rng.standard_normal((int(rng.integers(2 * n_ctrl, 60)), 3)), axis=0)
            pm, km = methods[k % len(methods)]
            curve, u, rep = classical_fit(pts, 3, n_ctrl, pm, km)
            worst_gap = max(worst_gap, rep.hausdorff - rep.max_error)
            # perfect fit: refit the model's own samples
            exact = eval_curve(curve, u)
            _, rep0 = least_squares_fit(exact, u, curve.knots, 3)
            perfect = max(perfect, rep0.max_error, rep0.mse_error, rep0.hausdorff, hausdorff(exact, exact))
    ok = worst_gap <= 1e-12 and perfect <= 1e-12
    report(capsys, 4, ok, f"max(hausdorff-max_error)={worst_gap:.1e} perfect_fit_metrics={perfect:.1e}")


def test_criterion_5_gradients(capsys):
    torch.set_num_threads(1)
    start = time.perf_counter()
    results = run_all(instances=50, seed=5)
    elapsed = time.perf_counter() - start
    with capsys.disabled():
        print("\n" + format_table(results))
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    report(capsys, 5, not failed and elapsed < 120,
           f"{len(results)} checks, worst rel err={worst:.1e}, failed={failed} time={elapsed:.1f}s")


def test_criterion_6_model_structure(capsys):
    torch.manual_seed(6)
    model = SplineGen(ModelConfig())
    model.eval()
    gen = torch.Generator().manual_seed(6)
    worst = 0.0
    with torch.no_grad():
        pts = torch.rand(1, 80, 3, generator=gen)
        e_knot, e_param = model.encode(pts)
        for _ in range(100):
            perm = torch.randperm(80, generator=gen)
            pk, pp = model.encode(pts[:, perm])
            worst = max(worst, (pk - e_knot[:, perm]).abs().max().item(), (pp - e_param[:, perm]).abs().max().item())

    rng = np.random.default_rng(6)
    bad_perm = bad_knots = runs = 0
    start = time.perf_counter()
    while runs < 1000:
        sets = [rng.random((int(rng.integers(4, 40)), 3)) for _ in range(50)]
        with torch.no_grad():
            results = model.infer(sets)
        for pts_, res in zip(sets, results):
            bad_perm += int(len(res["indices"]) != len(pts_) or sorted(res["indices"]) != list(range(len(pts_))))
            k = res["knots"]
            bad_knots += int(len(k) > model.cfg.max_knots or ((k < 0) | (k > 1)).any())
        runs += len(sets)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and bad_perm == 0 and bad_knots == 0
    report(capsys, 6, ok, f"equivariance_err={worst:.1e} bad_permutations={bad_perm}/{runs} "
                          f"bad_knot_outputs={bad_knots} decode_time={elapsed:.1f}s")


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Dataset, split and the four trained toy variants."""
    torch.set_num_threads(1)
    records = generate_dataset(GenConfig(), 2000, seed=0)
    train_recs, val_recs = train_val_split(records, 0.8, seed=0)
    train_ex = [Example.from_record(r) for r in train_recs]
    val_ex = [Example.from_record(r) for r in val_recs]
    runs = {}
    for name, (model_kw, train_kw) in VARIANTS.items():
        torch.manual_seed(0)
        model = SplineGen(ModelConfig(**model_kw))
        start = time.perf_counter()
        history = train(model, train_ex, val_ex, TrainConfig(epochs=30, **train_kw))
        runs[name] = (model, history, time.perf_counter() - start)
    out = tmp_path_factory.mktemp("acceptance")
    return {"train": train_recs, "val": val_recs, "runs": runs, "out": out}


def test_criterion_7_toy_training(toy_runs, capsys):
    rows = []
    for name, (_, history, secs) in toy_runs["runs"].items():
        last = history[-1]
        rows.append({"variant": name, "epochs": last["epoch"],
                     "param_loss": last["val_param"], "ordering_loss": last["val_ordering"],
                     "knot_loss": last["val_knot"], "total_loss": last["val_total"],
                     "epoch0_total": history[0]["val_total"], "seconds": round(secs, 1)})
    text = csv_text(rows, list(rows[0]))
    (toy_runs["out"] / "ablation.csv").write_text(text)
    parsed = list(csv.DictReader(io.StringIO(text)))
    full = rows[0]
    ratio = full["total_loss"] / full["epoch0_total"]
    total_time = sum(r["seconds"] for r in rows)
    complete = all(int(r["epochs"]) == 30 for r in parsed) and len(parsed) == 4
    finite = all(math.isfinite(float(r[k])) for r in parsed for k in ("param_loss", "ordering_loss"))
    with capsys.disabled():
        print("\n" + text, end="")
    ok = ratio <= 0.7 and complete and finite and total_time < 3600
    report(capsys, 7, ok, f"full model val loss {full['total_loss']:.4f} / epoch-0 {full['epoch0_total']:.4f} "
                          f"= {ratio:.3f}; ablations complete={complete}; train time={total_time / 60:.1f} min")


def test_criterion_8_benchmark(toy_runs, capsys):
    model = toy_runs["runs"]["full"][0]
    val = toy_runs["val"]
    text = csv_text(bench_rows(val, model), BENCH_COLUMNS)
    (toy_runs["out"] / "bench.csv").write_text(text)
    rows = list(csv.DictReader(io.StringIO(text)))
    well_formed = text.splitlines()[0] == ",".join(BENCH_COLUMNS) and all(len(r) == len(BENCH_COLUMNS) for r in rows)
    finite = all(math.isfinite(float(r[k])) for r in rows for k in ("max", "mse", "hausdorff"))
    with torch.no_grad():
        results = model.infer([r.samples for r in val])
    within = np.mean([abs(len(res["knots"]) - (rec.curve.n_ctrl - rec.curve.degree - 1)) <= 2
                      for rec, res in zip(val, results)])
    with capsys.disabled():
        print("\n" + text, end="")
        print(f"knot count within +-2 of ground truth: {within:.1%} of {len(val)} curves")
    report(capsys, 8, len(rows) == 9 and well_formed and finite, f"{len(rows)} rows, finite={finite}")


def test_criterion_9_finetune(toy_runs, capsys):
    model = toy_runs["runs"]["full"][0]
    shard = toy_runs["train"][:64]
    rep = pinn_finetune(model, shard, FinetuneConfig(epochs=1, lr=1e-5, batch_size=len(shard)))
    losses = [rep.initial_loss] + rep.epoch_losses + rep.train_losses
    finite = all(map(math.isfinite, losses))
    ok = finite and rep.epoch_losses[-1] < rep.initial_loss
    report(capsys, 9, ok, f"mean loss {rep.initial_loss:.5f} -> {rep.epoch_losses[-1]:.5f} "
                          f"(skipped {rep.skipped}) finite={finite}")
