import math

import numpy as np
import pytest

from knockoff_saliency.data import BoundingBox
from knockoff_saliency.metrics import (
    MS_WEIGHTS, MetricRow, SaliencyRecord, aggregate, baselines, crop_and_upscale, iou, ms_ssim,
    saliency_box, saliency_metric, ssim, wsl,
)
from stubs import ConstantStub, LinearStub

N = 100


# ---- loop oracles -----------------------------------------------------------

def ssim_loop(a, b, win, cs_only=False):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = [float(a[i + r, j + c]) for r in range(win) for c in range(win)]
            pb = [float(b[i + r, j + c]) for r in range(win) for c in range(win)]
            n = len(pa)
            ma, mb = sum(pa) / n, sum(pb) / n
            va = sum((p - ma) ** 2 for p in pa) / n
            vb = sum((p - mb) ** 2 for p in pb) / n
            cv = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
            lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
            cs = (2 * cv + c2) / (va + vb + c2)
            vals.append(cs if cs_only else lum * cs)
    return sum(vals) / len(vals)


def pool_loop(a):
    h, w = a.shape[0] // 2, a.shape[1] // 2
    return np.array([[(a[2 * i, 2 * j] + a[2 * i + 1, 2 * j] + a[2 * i, 2 * j + 1] + a[2 * i + 1, 2 * j + 1]) / 4
                      for j in range(w)] for i in range(h)])


def ms_ssim_loop(a, b):
    wts = [0.0448, 0.2856, 0.3001]
    wts = [x / sum(wts) for x in wts]
    out = 1.0
    for s in range(3):
        win = min(8, a.shape[0], a.shape[1])
        term = ssim_loop(a, b, win, cs_only=s < 2)
        out *= max(term, 0.0) ** wts[s]
        a, b = pool_loop(a), pool_loop(b)
    return out


def box_loop(m, t):
    pts = [(r, c) for r in range(m.shape[0]) for c in range(m.shape[1]) if m[r, c] > t]
    if not pts:
        return None
    return (min(p[0] for p in pts), min(p[1] for p in pts), max(p[0] for p in pts), max(p[1] for p in pts))


def iou_loop(a, b):
    sa = {(r, c) for r in range(a[0], a[2] + 1) for c in range(a[1], a[3] + 1)}
    sb = {(r, c) for r in range(b[0], b[2] + 1) for c in range(b[1], b[3] + 1)}
    return len(sa & sb) / len(sa | sb)


def bilinear_loop(x, box, size=28):
    crop = x[box[0]:box[2] + 1, box[1]:box[3] + 1]
    h, w = crop.shape
    out = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            sy = min(max((i + 0.5) * h / size - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / size - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (crop[y0, x0] * (1 - fy) * (1 - fx) + crop[y0, x1] * (1 - fy) * fx
                         + crop[y1, x0] * fy * (1 - fx) + crop[y1, x1] * fy * fx)
    return out


def random_box(rng, size=28):
    r = sorted(rng.integers(0, size, 2))
    c = sorted(rng.integers(0, size, 2))
    return BoundingBox(int(r[0]), int(c[0]), int(r[1]), int(c[1]))


def random_pair(rng, shape=(28, 28)):
    a = (rng.random(shape) < rng.uniform(0.1, 0.5)).astype(np.float64)
    kind = rng.integers(3)
    if kind == 0:
        b = rng.random(shape)
    elif kind == 1:
        b = np.where(rng.random(shape) < 0.2, 1 - a, a)
    else:
        b = np.clip(a + rng.normal(0, 0.2, shape), 0, 1)
    return a, b


# ---- SSIM / MS-SSIM --------------------------------------------------------

def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(10)
    for _ in range(N):
        shape = tuple(rng.integers(8, 16, 2))
        a, b = random_pair(rng, shape)
        assert abs(ssim(a, b) - ssim_loop(a, b, 8)) < 1e-6


def test_ms_ssim_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(N):
        a, b = random_pair(rng)
        assert abs(ms_ssim(a, b) - ms_ssim_loop(a, b)) < 1e-6


def test_ssim_closed_forms():
    z, o = np.zeros((28, 28)), np.ones((28, 28))
    assert ssim(z, o) < 0.01
    assert ssim(z, o) == pytest.approx(0.01 ** 2 / (1 + 0.01 ** 2))
    a = np.random.default_rng(0).random((28, 28))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ms_ssim(a, a) == pytest.approx(1.0)


def test_ms_ssim_symmetric_and_weights():
    rng = np.random.default_rng(12)
    assert sum(MS_WEIGHTS) == pytest.approx(1.0)
    for _ in range(20):
        a, b = random_pair(rng)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))
    with pytest.raises(ValueError):
        ssim(np.zeros((9, 9)), np.zeros((9, 10)))
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((28, 28)), np.zeros((28, 28)), scales=4, weights=[0.25] * 4)


def test_ms_ssim_corruption_ordering():
    rng = np.random.default_rng(13)
    digits = (rng.random((100, 28, 28)) < 0.2).astype(np.float64)

    def flipped(x, f):
        m = np.zeros(784, bool)
        m[rng.choice(784, int(f * 784), replace=False)] = True
        return np.where(m.reshape(28, 28), 1 - x, x)

    lo = np.mean([ms_ssim(x, flipped(x, 0.1)) for x in digits])
    hi = np.mean([ms_ssim(x, flipped(x, 0.5)) for x in digits])
    assert lo > hi


# ---- boxes / IOU / WSL -----------------------------------------------------

def test_saliency_box_matches_scan():
    rng = np.random.default_rng(14)
    for _ in range(N):
        m = rng.normal(size=(28, 28))
        t = rng.uniform(1.0, 3.5)
        b = saliency_box(m, t)
        assert (None if b is None else b.as_tuple()) == box_loop(m, t)


def test_saliency_box_edges():
    m = np.zeros((28, 28))
    m[4, 7] = 1
    assert saliency_box(m, 0.5).as_tuple() == (4, 7, 4, 7)
    assert saliency_box(np.ones((28, 28)), 0.5).as_tuple() == (0, 0, 27, 27)
    assert saliency_box(np.zeros((28, 28)), 0.5) is None
    with pytest.raises(ValueError):
        saliency_box(np.full((28, 28), np.nan), 0.5)


def test_saliency_box_threshold_monotone():
    m = np.random.default_rng(15).random((28, 28))
    prev = None
    for t in np.linspace(0, 0.99, 30):
        b = saliency_box(m, t)
        if prev is not None and b is not None:
            assert iou(prev, b) * prev.area >= b.area - 1e-9
        prev = b


def test_iou_matches_loop_oracle():
    rng = np.random.default_rng(16)
    for _ in range(N):
        a, b = random_box(rng, 20), random_box(rng, 20)
        assert abs(iou(a, b) - iou_loop(a.as_tuple(), b.as_tuple())) < 1e-6
        assert iou(a, b) == iou(b, a)


def test_iou_examples():
    a = BoundingBox(0, 0, 9, 9)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(10, 10, 12, 12)) == 0.0
    assert iou(a, BoundingBox(0, 5, 9, 14)) == pytest.approx(1 / 3)


def test_wsl_matches_loop_oracle():
    rng = np.random.default_rng(17)
    for _ in range(N):
        pairs = [(None if rng.random() < 0.1 else random_box(rng), random_box(rng)) for _ in range(20)]
        hits = 0
        for sb, gt in pairs:
            if sb is not None and iou_loop(sb.as_tuple(), gt.as_tuple()) > 0.5:
                hits += 1
        assert abs(wsl(pairs) - 100.0 * hits / len(pairs)) < 1e-6


def test_wsl_examples():
    a, b = BoundingBox(0, 0, 3, 3), BoundingBox(10, 10, 12, 12)
    assert wsl([(a, a)] * 3) == 100.0
    assert wsl([(a, b)] * 3) == 0.0
    assert wsl([(None, a)]) == 0.0
    with pytest.raises(ValueError):
        wsl([])


# ---- saliency metric -------------------------------------------------------

def test_crop_and_upscale_matches_loop():
    rng = np.random.default_rng(18)
    for _ in range(N):
        x = rng.random((28, 28)).astype(np.float32)
        b = random_box(rng)
        np.testing.assert_allclose(crop_and_upscale(x, b), bilinear_loop(x, b.as_tuple()), atol=1e-6)


def test_full_box_upscale_is_identity():
    x = np.random.default_rng(0).random((28, 28)).astype(np.float32)
    np.testing.assert_array_equal(crop_and_upscale(x, BoundingBox.full((28, 28))), x)


def test_sm_matches_formula_oracle():
    rng = np.random.default_rng(19)
    w = rng.normal(0, 0.05, size=(784, 10))
    clf = LinearStub(w)
    for _ in range(N):
        x = (rng.random((28, 28)) < 0.3).astype(np.float32)
        b = random_box(rng)
        c = int(rng.integers(10))
        z = bilinear_loop(x, b.as_tuple()).reshape(-1) @ w
        p = math.exp(z[c] - z.max()) / sum(math.exp(v - z.max()) for v in z)
        expect = math.log(max(b.area / 784, 0.05)) - math.log(max(p, 1e-6))
        assert abs(saliency_metric(clf, x, b, c) - expect) < 1e-5


def test_sm_endpoints():
    sure = ConstantStub([0.0, 1.0])
    x = np.zeros((28, 28), np.float32)
    assert saliency_metric(sure, x, BoundingBox.full((28, 28)), 1) == 0.0
    assert saliency_metric(sure, x, BoundingBox(0, 0, 1, 1), 1) == pytest.approx(math.log(0.05))
    assert saliency_metric(sure, x, None, 1) == 0.0
    # p floor
    assert saliency_metric(sure, x, BoundingBox.full((28, 28)), 0) == pytest.approx(-math.log(1e-6))


def test_sm_shrinks_with_box_at_constant_confidence():
    clf = ConstantStub([0.3, 0.7])
    x = np.zeros((28, 28), np.float32)
    vals = [saliency_metric(clf, x, BoundingBox(0, 0, k, k), 1) for k in range(27, 5, -1)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


# ---- baselines and aggregation --------------------------------------------

def test_baselines():
    rng = np.random.default_rng(20)
    imgs = np.zeros((6, 28, 28), np.float32)
    for i in range(6):
        r, c = rng.integers(4, 10, 2)
        imgs[i, r:r + 12, c:c + 8] = 1
    labels = np.array([0, 1, 0, 1, 1, 0])
    recs = baselines(ConstantStub([0.5, 0.5]), imgs, labels)
    rows = {(r.method, r.cls): r for r in aggregate(recs)}
    assert rows[("MAX", "all")].wsl == 100.0
    assert rows[("MIN", "all")].wsl == 0.0
    assert rows[("MIN", "all")].sm >= 0.0


def test_aggregate_per_class_consistent():
    rng = np.random.default_rng(21)
    recs = [SaliencyRecord(i, int(rng.integers(10)), "flip", "ssr", "0.5", float(rng.normal()),
                           bool(rng.random() < 0.7), None, (0, 0, 1, 1)) for i in range(500)]
    rows = aggregate(recs)
    per = [r for r in rows if r.cls != "all"]
    total = next(r for r in rows if r.cls == "all")
    assert sum(r.count for r in per) == total.count == 500
    assert abs(sum(r.sm * r.count for r in per) / 500 - total.sm) < 1e-9
    assert abs(sum(r.wsl * r.count for r in per) / 500 - total.wsl) < 1e-9
    with pytest.raises(ValueError):
        MetricRow("x", "ssr", "0.5", 0.0, 101.0, "all", 1)
