"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import record

from rinq.dictionary import (
    GridSpec,
    build_grid,
    compress_svd,
    generate_dictionary,
    match_batch,
    match_map,
    project,
)
from rinq.evaluation import QuantitativeMap, error_map, relative_mean_error, render_error, render_map, window
from rinq.experiments import ExperimentManifest, run_experiment, run_orderings
from rinq.models import build_preset, count_params, shape_trace
from rinq.ndnn import (
    BatchNormState,
    avg_pool1d,
    batch_norm,
    conv1d,
    finite_difference_check,
    fully_connected,
    lstm_sequence,
    mse_loss,
    parameter,
    relu,
)
from rinq.ndnn import finite_difference_check as fd_check
from rinq.ndnn.ops import weighted_sum
from rinq.ndnn.tensor import Tape
from rinq.phantom import Phantom, make_phantom, render_ground_truth, synthesize_signals
from rinq.quantile import quantile_forward, quantile_matrix
from rinq.seqsim import ParameterPair, isochromat_simulate, make_schedule, simulate_batch

# ----------------------------------------------------------------------- 1

REFERENCE_SHAPES = {
    "rnn1-mag": [(30, 100), (30, 1000), (30, 500), (30, 250), (7500,), (360,), (2,)],
    "rnn1-complex": [(30, 200), (30, 1000), (30, 500), (30, 250), (7500,), (360,), (2,)],
    "rnn3-complex": [(30, 1800), (30, 500), (30, 500), (30, 250), (7500,), (360,), (3, 3, 40), (3, 3, 2), (2,)],
    "cnn1-mag": [(598, 30), (197, 60), (97, 120), (48, 240), (23, 240), (5520,), (1000,), (500,), (300,), (2,)],
    "cnn1-complex": [(598, 30), (197, 60), (97, 120), (48, 240), (23, 240), (5520,), (1000,), (500,), (300,), (2,)],
}
REFERENCE_MILLIONS = {"rnn1-mag": 7.7, "rnn1-complex": 8.1, "rnn3-complex": 7.7, "cnn1-mag": 6.3, "cnn1-complex": 6.3}


def test_c1_architecture_fidelity():
    t0 = time.perf_counter()
    bad = []
    for name, want in REFERENCE_SHAPES.items():
        cfg = build_preset(name, 3000)
        got = [s for _, s in shape_trace(cfg)[1:]]
        if got != want:
            bad.append(f"{name} shapes {got}")
        n = count_params(cfg)
        if abs(n / 1e6 - REFERENCE_MILLIONS[name]) > 0.05:
            bad.append(f"{name} count {n}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 1.0
    record("C1 architecture fidelity", ok, f"{len(REFERENCE_SHAPES)} models, {dt:.2f} s {'; '.join(bad)}")
    assert ok


# ----------------------------------------------------------------------- 2


def test_c2_quantile_layer():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    fails = 0
    for _ in range(1000):
        C = int(rng.integers(1, 9))
        q = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, rng.uniform()]))
        vals = rng.standard_normal((3, 3, C))
        if rng.uniform() < 0.3:  # exercise ties
            vals = np.round(vals) + 0.0  # +0.0 drops negative zeros, whose sign is not part of the contract
        f = parameter(vals)
        g = rng.standard_normal(C)
        with Tape() as tape:
            out, sel = quantile_forward(f, q)
            loss = weighted_sum(out, g)
        tape.backward(loss)
        Q = quantile_matrix(sel)
        fwd_ok = (Q @ vals.reshape(-1)).tobytes() == out.data.tobytes()
        bwd_ok = (Q.T @ g).tobytes() == f.grad.reshape(-1).tobytes()
        nnz_ok = Q.nnz == C and np.count_nonzero(f.grad) == np.count_nonzero(g)
        fails += not (fwd_ok and bwd_ok and nnz_ok)
    # finite differences on tie-free inputs: values are spaced 1 apart, so h = 0.1
    # never reorders them, and the piecewise-linear layer has no truncation error
    fd = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        C = 4
        f = parameter(r.permutation(9 * C).astype(float).reshape(3, 3, C))
        g = r.standard_normal(C)
        fd = max(fd, fd_check(lambda: weighted_sum(quantile_forward(f, 0.5)[0], g), [f], h=0.1))
    dt = time.perf_counter() - t0
    ok = fails == 0 and fd < 1e-8 and dt < 10
    record("C2 quantile layer", ok, f"1000 cases, {fails} failures, FD rel err {fd:.1e}, {dt:.1f} s")
    assert ok


# ----------------------------------------------------------------------- 3


def _gradient_suite():
    # five-point stencil at h = 1e-3: truncation and rounding both near 1e-12
    def finite_difference_check(fn, params):
        return fd_check(fn, params, h=1e-3, order=4)

    rng = np.random.default_rng(3)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    out = {}
    x, w, b, c = parameter(r(5, 7)), parameter(r(7, 4)), parameter(r(4)), r(5, 4)
    out["fc"] = finite_difference_check(lambda: weighted_sum(fully_connected(x, w, b), c), [x, w, b])
    xr = parameter(r(6, 5))
    xr.data[np.abs(xr.data) < 0.05] = 0.5  # keep the stencil away from the kink
    out["relu"] = finite_difference_check(lambda: weighted_sum(relu(xr), r(6, 5) * 0 + 1.3), [xr])
    xb, g_, b_, cb = parameter(r(6, 4, 3)), parameter(r(3)), parameter(r(3)), r(6, 4, 3)

    def bn_loss():
        return weighted_sum(batch_norm(xb, g_, b_, BatchNormState.fresh(3), True), cb)

    out["batchnorm"] = finite_difference_check(bn_loss, [xb, g_, b_])
    xc, wc, bc = parameter(r(2, 20, 3)), parameter(r(5, 3, 4)), parameter(r(4))
    cc = r(2, 6, 4)
    out["conv1d"] = finite_difference_check(lambda: weighted_sum(conv1d(xc, wc, bc, stride=3), cc), [xc, wc, bc])
    xp = parameter(r(2, 11, 3))
    out["avgpool"] = finite_difference_check(lambda: weighted_sum(avg_pool1d(xp, 3, 2), r(2, 5, 3) * 0 + 0.7), [xp])
    H = 4
    xl, wx, wh, bl = parameter(r(2, 6, 3)), parameter(r(3, 4 * H) * 0.5), parameter(r(H, 4 * H) * 0.5), parameter(r(4 * H))
    cl = r(2, 6, H)
    out["lstm"] = finite_difference_check(lambda: weighted_sum(lstm_sequence(xl, wx, wh, bl), cl), [xl, wx, wh, bl])
    pm, tm = parameter(r(5, 2)), r(5, 2)
    out["mse"] = finite_difference_check(lambda: mse_loss(pm, tm), [pm])
    return out


def test_c3_gradient_suite():
    t0 = time.perf_counter()
    errs = _gradient_suite()
    dt = time.perf_counter() - t0
    limits = {k: (1e-4 if k == "lstm" else 1e-5) for k in errs}
    ok = all(errs[k] < limits[k] for k in errs) and dt < 60
    worst = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record("C3 gradient suite", ok, f"{worst}; {dt:.1f} s")
    assert ok


# ----------------------------------------------------------------------- 4


def test_c4_simulator_oracle():
    t0 = time.perf_counter()
    sched = make_schedule(200, seed=4)
    rng = np.random.default_rng(4)
    t1 = rng.uniform(100, 4000, 20)
    t2 = np.minimum(rng.uniform(5, 500, 20), t1)
    epg = simulate_batch(t1, t2, sched)
    worst = 0.0
    for i in range(20):
        iso = isochromat_simulate(ParameterPair(t1[i], t2[i]), sched, n_spins=20000)
        worst = max(worst, np.max(np.abs(epg[i] - iso)) / np.max(np.abs(epg[i])))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 120
    record("C4 simulator oracle", ok, f"20 pairs, worst |EPG-iso|/peak {worst:.1e}, {dt:.1f} s")
    assert ok


# ----------------------------------------------------------------------- 5


def test_c5_grid_and_matching():
    t0 = time.perf_counter()
    grid = build_grid(GridSpec())
    t1s, t2s = np.unique(grid[:, 0]), np.unique(grid[:, 1])
    grid_ok = grid.shape == (10_500, 2) and t1s.size == 105 and t2s.size == 100

    sched = make_schedule(1000, seed=5)
    d = generate_dictionary(grid, sched)

    # noiseless on-grid phantom
    ph = make_phantom(32, 32, 12, seed=5)
    rng = np.random.default_rng(5)
    ph = Phantom(ph.labels, {k: ParameterPair(*grid[rng.integers(len(grid))]) for k in ph.region_params})
    stack = synthesize_signals(ph, sched)
    gt = render_ground_truth(ph)
    full = match_map(stack, d, stack.mask)
    exact = bool(
        np.array_equal(full.t1_ms[gt.valid], gt.t1_ms[gt.valid])
        and np.array_equal(full.t2_ms[gt.valid], gt.t2_ms[gt.valid])
    )

    # off-grid noise-free queries: compressed vs full winning index
    t1 = np.exp(rng.uniform(np.log(20), np.log(4400), 2000))
    t2 = np.minimum(np.exp(rng.uniform(np.log(3), np.log(2900), 2000)), t1)
    queries = simulate_batch(t1, t2, sched)
    idx_full, _ = match_batch(queries, d)
    basis, _ = compress_svd(d, 50)
    idx_c, _ = match_batch(project(queries, basis), d)
    agree = float(np.mean(idx_full == idx_c))
    dt = time.perf_counter() - t0
    ok = grid_ok and exact and agree >= 0.99 and dt < 300
    record(
        "C5 grid and matching",
        ok,
        f"grid {t1s.size}x{t2s.size}={len(grid)}, on-grid exact {exact}, "
        f"r=50 agreement {100 * agree:.2f}% (energy {basis.energy_fraction():.6f}), {dt:.0f} s",
    )
    assert ok


# ----------------------------------------------------------------------- 6

DESK_MANIFEST = Path(__file__).resolve().parents[1] / "scripts" / "manifests" / "orderings_desk.json"


def test_c6_model_orderings(tmp_path):
    t0 = time.perf_counter()
    m = ExperimentManifest.load(DESK_MANIFEST)
    m.output_dir = str(tmp_path)
    summary = run_orderings(m, seeds=(0, 1, 2))
    dt = time.perf_counter() - t0
    parts = [
        f"{o['better']} < {o['worse']} median margin {100 * o['median_margin']:+.1f}% {'ok' if o['holds'] else 'FAILS'}"
        for o in summary["orderings"]
    ]
    ok = len(summary["orderings"]) == 3 and all(o["holds"] for o in summary["orderings"])
    record("C6 model orderings", ok, "; ".join(parts) + f"; {dt / 60:.0f} min on this machine")
    assert ok, json.dumps(summary["losses"])


# ----------------------------------------------------------------------- 7


def test_c7_metric_identities():
    def ones(shape):
        return np.ones(shape, bool)

    gt = QuantitativeMap(np.array([[100.0, 200.0], [300.0, 400.0]]), np.full((2, 2), 50.0), ones((2, 2)))
    ten = relative_mean_error(QuantitativeMap(gt.t1_ms * 1.1, gt.t2_ms * 1.1, gt.valid), gt)
    case1 = abs(ten["t1"]["rme_percent"] - 10.0) < 1e-12 and abs(ten["t1"]["std_percent"]) < 1e-12
    g2 = QuantitativeMap(np.array([[100.0, 100.0]]), np.array([[100.0, 100.0]]), ones((1, 2)))
    p2 = QuantitativeMap(np.array([[110.0, 70.0]]), np.array([[110.0, 70.0]]), ones((1, 2)))
    m2 = relative_mean_error(p2, g2)["t1"]
    case2 = m2["rme_percent"] == 20.0 and m2["std_percent"] == 10.0

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        a, b = rng.uniform(1, 5000, (2, 8, 8))
        pm, gm = QuantitativeMap(a, a, ones(a.shape)), QuantitativeMap(b, b, ones(b.shape))
        e = error_map(pm, gm, "t1", clip_percent=None)
        worst = max(worst, abs(np.nanmean(e) - relative_mean_error(pm, gm)["t1"]["rme_percent"]))
    mean_ok = worst <= 1e-9

    win = window(np.array([0.0, 4000.0, -1.0, 5000.0]), 0.0, 4000.0).tolist() == [0, 65535, 0, 65535]
    bg = QuantitativeMap(np.array([[4000.0, 0.0]]), np.array([[600.0, 0.0]]), np.array([[True, False]]))
    render_ok = render_map(bg, "t1").tolist() == [[65535, 0]] and render_map(bg, "t2").tolist() == [[65535, 0]]
    clip_ok = render_error(np.array([[100.0, 400.0, 0.0]])).tolist() == [[65535, 65535, 0]]
    ok = case1 and case2 and mean_ok and win and render_ok and clip_ok
    record(
        "C7 metric identities",
        ok,
        f"10% {case1}, 20+-10% {case2}, map-mean gap {worst:.1e}, windows {win and render_ok}, clip {clip_ok}",
    )
    assert ok


# ----------------------------------------------------------------------- 8


def _tree_digest(root: Path) -> dict:
    skip = {"timings.json"}
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def test_c8_determinism(tmp_path):
    m = ExperimentManifest(seed=3)
    m.schedule.n_reps = 300
    m.phantoms.height = m.phantoms.width = 16
    m.phantoms.n_regions = 6
    m.training.epochs = 2
    m.training.overrides = {"rnn3-complex": {"batch_size": 16}}
    digests = []
    for run in ("a", "b"):
        m.output_dir = str(tmp_path / run)
        run_experiment(m, "all-models")
        digests.append(_tree_digest(tmp_path / run))
    a, b = digests
    ckpts = [k for k in a if k.endswith(".rnqc")]
    metrics = [k for k in a if k.endswith(".json")]
    same = a == b
    record(
        "C8 determinism",
        same and len(ckpts) == 5,
        f"{len(a)} files compared ({len(ckpts)} checkpoints, {len(metrics)} JSON), identical {same}",
    )
    assert same and len(ckpts) == 5
    assert json.loads((tmp_path / "a" / "report.json").read_text())["rows"]
