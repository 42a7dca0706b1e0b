"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest

from oracles import mine_pairs_enumerated, ms_loss_enumerated
from rotvpr import aggregation as agg
from rotvpr import dataset as ds
from rotvpr import equivariant as eq
from rotvpr import metric_learning as ml
from rotvpr import retrieval as rt
from rotvpr import tensor_core as tc
from rotvpr.backbone import ModelConfig, build_model, encode_batch
from rotvpr.experiment import ToyConfig, run_comparison


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line straight to the terminal, then assert."""
    def report(criterion: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, detail
    return report


def masked_inputs(rng, b, size, dtype=np.float64):
    return (rng.random((b, 3, size, size)) * ds.circle_mask(size)).astype(dtype)


def smooth_disks(seed, count, diameter):
    """Seeded fractal-noise circular images."""
    r = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        chans = [ds.fractal_noise(r, (diameter + 8, diameter + 8), 12.0) for _ in range(3)]
        raster = (np.clip(np.stack(chans, -1), 0, 1) * 255).astype(np.uint8)
        c = (diameter + 8) / 2 - 0.5
        out.append(ds.extract_circular(raster, (c, c), diameter))
    return out


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_exact_c4_equivariance(verdict):
    group = eq.GroupSpec(4)
    worst_layer, worst_desc = 0.0, 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        base = dict(group_order=4, stage_widths=(4, 8, 8), blocks_per_stage=1, input_size=32,
                    descriptor_dim=16, seed=seed)
        m64 = build_model(ModelConfig(**base, dtype="float64"))
        x = masked_inputs(r, 2, 32)
        xr = eq.rotate_spatial(x, math.pi / 2)
        a, b = [], []
        m64.forward(x, keep=a)
        m64.forward(xr, keep=b)
        for fa, fb in zip(a, b):
            if fa.ndim == 5:
                expected = eq.act(fa, group, 1)
            elif fa.ndim == 4:
                expected = eq.rotate_spatial(fa, math.pi / 2)
            else:
                expected = fa
            worst_layer = max(worst_layer, float(np.abs(fb - expected).max()))
        m32 = build_model(ModelConfig(**base, dtype="float32"))
        d = encode_batch(m32, x.astype(np.float32))
        dr = encode_batch(m32, xr.astype(np.float32))
        worst_desc = max(worst_desc, float(np.abs(d - dr).max()))
    ok = worst_layer < 1e-9 and worst_desc < 1e-5
    verdict(1, ok, f"max layer error {worst_layer:.2e} (< 1e-9, 64-bit), "
                   f"max descriptor difference {worst_desc:.2e} (< 1e-5, 32-bit) over 50 models")


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_2_c8_beats_baseline_at_45_degrees(verdict):
    toy = ToyConfig()
    disks = smooth_disks(2024, 200, toy.diameter_px)
    up = np.stack([ds.rotate_then_crop(d, 0.0, toy.input_size, 0.9) for d in disks])
    turned = np.stack([ds.rotate_then_crop(d, math.pi / 4, toy.input_size, 0.9) for d in disks])
    mean_cos = {}
    for order in (1, 8):
        m = build_model(toy.model_config(order))
        a = encode_batch(m, up).astype(np.float64)
        b = encode_batch(m, turned).astype(np.float64)
        mean_cos[order] = float(np.mean(np.sum(a * b, axis=1)))
    gap = mean_cos[8] - mean_cos[1]
    verdict(2, gap >= 0.1, f"mean cosine at 45 deg: C8 {mean_cos[8]:.4f}, N=1 {mean_cos[1]:.4f}, "
                           f"gap {gap:+.4f} (need >= 0.1)")


# -- 3 ------------------------------------------------------------------------------------

def _split(flat, shapes):
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[i:i + n].reshape(s))
        i += n
    return out


def _layer_ops(seed):
    """Scalar-projected ops ``name -> (op, point)`` for one seeded point."""
    r = np.random.default_rng(seed)
    ops = {}

    xs, ws = (2, 2, 6, 6), (3, 2, 3, 3)
    proj = r.normal(size=(2, 3, 6, 6))

    def conv(v):
        x, w = _split(v, [xs, ws])
        dx, dw = tc.conv2d_backward(proj, x, w, 1, 1)
        return float((proj * tc.conv2d(x, w, 1, 1)).sum()), np.concatenate([dx.ravel(), dw.ravel()])
    ops["conv2d"] = (conv, r.normal(size=int(np.prod(xs) + np.prod(ws))))

    g = eq.GroupSpec(4)
    gx, gk = (1, 2, 4, 5, 5), (2, 2, 4, 3, 3)
    gproj = r.normal(size=(1, 2, 4, 5, 5))

    def gconv(v):
        x, k = _split(v, [gx, gk])
        dx, dk = eq.group_conv_backward(gproj, x, k, g, 1, 1)
        return (float((gproj * eq.group_conv(x, k, g, 1, 1)).sum()),
                np.concatenate([dx.ravel(), dk.ravel()]))
    ops["group_conv"] = (gconv, r.normal(size=int(np.prod(gx) + np.prod(gk))))

    bx = (3, 2, 4, 3, 3)
    bproj = r.normal(size=bx)

    def bn(v):
        x, gamma, beta = _split(v, [bx, (2,), (2,)])
        dx, dg, db = tc.normalize_batch_backward(bproj, x, gamma)
        return (float((bproj * tc.normalize_batch(x, gamma, beta)).sum()),
                np.concatenate([dx.ravel(), dg, db]))
    ops["normalize_batch"] = (bn, np.concatenate([r.normal(size=int(np.prod(bx))),
                                                  r.uniform(0.5, 2, 2), r.normal(size=2)]))

    gpx = (3, 4, 4)
    gproj2 = r.normal(size=3)

    def gem(v):
        x, p = _split(v, [gpx, (1,)])
        dx, dp = agg.gem_pool_backward(gproj2, x, p[0])
        return float(gproj2 @ agg.gem_pool(x, p[0])), np.concatenate([dx.ravel(), [dp]])
    ops["gem (x and p)"] = (gem, np.concatenate([r.uniform(0.1, 1.5, int(np.prod(gpx))),
                                                 [r.uniform(1.5, 6)]]))

    lx, lw = (2, 5), (4, 5)
    lproj = r.normal(size=(2, 4))

    def lin(v):
        x, w, b = _split(v, [lx, lw, (4,)])
        dx, dw, db = tc.linear_backward(lproj, x, w)
        return float((lproj * tc.linear(x, w, b)).sum()), np.concatenate([dx.ravel(), dw.ravel(), db])
    ops["linear"] = (lin, r.normal(size=10 + 20 + 4))

    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    cfg = ml.MsLossConfig()
    start = r.normal(size=(8, 6))
    u0 = start / np.linalg.norm(start, axis=1, keepdims=True)
    # mining is piecewise constant, so the sets are held at those of the start point
    mined = ml.mine_pairs(u0 @ u0.T, labels, cfg.epsilon)

    def ms(v):
        v = v.reshape(8, 6)
        n = np.linalg.norm(v, axis=1, keepdims=True)
        u = v / n
        res = ml.ms_loss(u @ u.T, labels, mined, cfg)
        gd = (res.grad + res.grad.T) @ u
        return res.loss, ((gd - u * np.sum(gd * u, axis=1, keepdims=True)) / n).ravel()
    ops["ms_loss"] = (ms, start.ravel())
    return ops


def test_criterion_3_gradients(verdict):
    worst = {}
    for seed in range(100):
        for name, (op, point) in _layer_ops(seed).items():
            err = tc.grad_check(op, point, step=1e-3, stencil=5)
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(v < 1e-4 for v in worst.values())
    verdict(3, ok, "max relative error over 100 points: "
                   + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 4 and 10 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def comparison():
    t0 = time.perf_counter()
    outcomes = run_comparison(ToyConfig(), seeds=range(5))
    return outcomes, time.perf_counter() - t0


def test_criterion_4_c4_beats_baseline(verdict, comparison):
    outcomes, seconds = comparison
    gaps = [o.recall1[4] - o.recall1[1] for o in outcomes]
    wins = sum(g >= 10 for g in gaps)
    per_seed = "; ".join(f"seed {o.seed}: C4 {o.recall1[4]:.1f} vs N=1 {o.recall1[1]:.1f}"
                         for o in outcomes)
    verdict(4, wins >= 4, f"{wins}/5 seeds with a gap >= 10 pp ({per_seed}); {seconds / 60:.1f} min")


def test_criterion_10_dimension_sweep(verdict, comparison):
    outcomes, _ = comparison
    dims = [512, 256, 128, 64, 32]
    mean = [float(np.mean([o.sweep[d] for o in outcomes])) for d in dims]
    ok = all(b <= a for a, b in zip(mean, mean[1:]))
    verdict(10, ok, "mean R@1 by dim: " + ", ".join(f"{d}: {v:.2f}" for d, v in zip(dims, mean)))


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_5_retrieval(verdict):
    from test_retrieval import DB_POS, DB_ROWS, Q_ANGLE, Q_POS, RADIUS_POS, SAME_POS, TOP, WINDOW_POS

    mismatches = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 60))
        rows = r.normal(size=(n, 8))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        rows[r.integers(0, n, n // 3)] = rows[0]       # exact ties
        ids = r.permutation(10 * n)[:n]
        store = rt.build_store(rows, ids)
        q = store.rows[int(r.integers(0, n))].astype(np.float64)
        q /= np.linalg.norm(q)
        got = [i for i, _ in rt.query(store, q, n)]
        oracle = [i for _, i in sorted((-float(np.dot(row.astype(np.float64), q)), int(i))
                                       for row, i in zip(store.rows, store.ids))]
        mismatches += got != oracle

    db = rt.build_store(DB_ROWS, np.arange(20), positions=DB_POS)
    qs = rt.build_store(np.stack([np.cos(Q_ANGLE), np.sin(Q_ANGLE)], axis=1), np.arange(4),
                        positions=Q_POS)
    wrong = []
    for crit, pos in [(rt.RadiusMeters(50), RADIUS_POS), (rt.IndexWindow(3), WINDOW_POS),
                      (rt.SamePlaceId(), SAME_POS)]:
        rep = rt.recall_at_n(qs, db, crit)
        want = {}
        counted = [i for i, p in enumerate(pos) if p]
        for n in (1, 5, 10):
            want[n] = 100 * sum(bool(set(TOP[i][:n]) & pos[i]) for i in counted) / len(counted)
        if rep.recall != pytest.approx(want):
            wrong.append(str(crit))
    ok = mismatches == 0 and not wrong
    verdict(5, ok, f"{mismatches}/100 stores differ from the sort oracle; "
                   f"20-item case mismatched under: {wrong or 'none'}")


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_6_storage_estimate(verdict):
    n, total = rt.estimate_storage(357000, 0.08, 512, 2)
    shown = f"{total / 1e9:.2f} GB"
    ok = n == 4_462_500 and shown == "4.57 GB"
    verdict(6, ok, f"{n} images, {total} bytes = {shown}")


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_7_encoding_cost_order(verdict):
    toy = ToyConfig()
    images = masked_inputs(np.random.default_rng(7), 8, toy.input_size, np.float32)
    mean = {}
    for order in (1, 4, 8):
        m = build_model(toy.model_config(order))
        mean[order] = rt.bench_encode(m, images, warmup=3, reps=100).mean_ms
    ok = mean[1] <= mean[4] <= mean[8]
    verdict(7, ok, "mean ms per image (batch 1, 100 reps): "
                   + ", ".join(f"N={k} {v:.2f}" for k, v in mean.items()))


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_8_dataset_invariants(verdict):
    toy = ToyConfig()
    world = ds.generate_world(toy.world_spec())
    records, images, _ = ds.build_places(world, toy.interval_m, toy.diameter_px)
    overlaps = 0
    for a, b in itertools.combinations(records, 2):
        d = math.hypot(a.location.lat - b.location.lat, a.location.lon - b.location.lon)
        overlaps += d < (a.ground_diameter_m + b.ground_diameter_m) / 2

    pts = sorted((p.lon, p.lat) for p in ds.sample_grid([(0, 0), (1, 0), (1, 1), (0, 1)], 0.25))
    grid = sorted((x / 4, y / 4) for x in (1, 2, 3) for y in (1, 2, 3))
    grid_ok = len(pts) == 9 and np.allclose(pts, grid, atol=1e-12)

    img = images[(records[0].place_id, 0)]
    turn = float(np.abs(ds.rotate_then_crop(img, 2 * math.pi, toy.input_size)
                        - ds.rotate_then_crop(img, 0.0, toy.input_size)).max())
    ok = overlaps == 0 and grid_ok and turn <= 1e-6
    verdict(8, ok, f"{len(records)} places, {overlaps} overlapping pairs; unit-square grid "
                   f"{'matches' if grid_ok else 'differs'}; full-turn error {turn:.1e}")


# -- 9 ------------------------------------------------------------------------------------

def set_partitions(n):
    """Canonical labelings (restricted growth strings) of n items."""
    def grow(prefix, top):
        if len(prefix) == n:
            yield list(prefix)
            return
        for lab in range(top + 2):
            yield from grow(prefix + [lab], max(top, lab))
    yield from grow([0], 0)


def test_criterion_9_mining_and_loss_brute_force(verdict):
    grid = np.arange(-4, 5) / 8            # multiples of 1/8, exact in binary
    cfg = ml.MsLossConfig()
    cases = bad = 0
    r = np.random.default_rng(9)
    for n in range(2, 7):
        for labels in set_partitions(n):
            if len(set(labels)) < 2:
                continue
            labels = np.array(labels)
            for _ in range(3):
                s = r.choice(grid, size=(n, n))
                sim = np.triu(s, 1) + np.triu(s, 1).T + np.eye(n)
                for eps in (0.1, 0.125, 0.25):
                    cases += 1
                    mined = ml.mine_pairs(sim, labels, eps)
                    pos = {(i, int(j)) for i, js in enumerate(mined.positives) for j in js}
                    neg = {(i, int(j)) for i, js in enumerate(mined.negatives) for j in js}
                    want_pos, want_neg = mine_pairs_enumerated(sim, labels, eps)
                    loss = ml.ms_loss(sim, labels, mined, cfg).loss
                    want_loss = ms_loss_enumerated(sim, labels, want_pos, want_neg,
                                                   cfg.alpha, cfg.beta, cfg.lam)
                    if (pos, neg) != (want_pos, want_neg) or not math.isclose(loss, want_loss,
                                                                              rel_tol=1e-12,
                                                                              abs_tol=1e-15):
                        bad += 1
    verdict(9, bad == 0, f"{cases} batches of size 2..6 checked, {bad} disagreements")
