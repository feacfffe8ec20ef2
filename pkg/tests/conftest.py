import numpy as np
import pytest

from corrfabr.tensor_io import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def loop_mean(feat, mask):
    acc = np.zeros(feat.shape[2])
    count = 0
    for i in range(feat.shape[0]):
        for j in range(feat.shape[1]):
            if mask[i, j]:
                for c in range(feat.shape[2]):
                    acc[c] += feat[i, j, c]
                count += 1
    return acc / count


def sort_p95(values):
    """Nearest-rank 95th percentile per column by explicit sorting."""
    import math
    m = len(values)
    rank = max(1, math.ceil(0.95 * m))
    out = []
    for c in range(values.shape[1]):
        col = sorted(float(v) for v in values[:, c])
        out.append(col[rank - 1])
    return np.array(out)


def otsu_sweep(gray, levels=256):
    """Exhaustive Otsu: every split scored by the textbook between-class
    variance w0 w1 (mu0 - mu1)^2 in exact rationals; first maximum wins."""
    from fractions import Fraction
    lo, hi = float(gray.min()), float(gray.max())
    bins = [min(levels - 1, int(np.floor((g - lo) / (hi - lo) * levels)))
            for g in gray.ravel()]
    n = len(bins)
    best, best_t = None, None
    for t in range(1, levels):
        c0 = [b for b in bins if b < t]
        c1 = [b for b in bins if b >= t]
        if not c0 or not c1:
            continue
        w0, w1 = Fraction(len(c0), n), Fraction(len(c1), n)
        mu0, mu1 = Fraction(sum(c0), len(c0)), Fraction(sum(c1), len(c1))
        var = w0 * w1 * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t, lo + best_t * (hi - lo) / levels


H = np.array([0.65, 0.70, 0.29])
E = np.array([0.07, 0.99, 0.11])


def two_stain_image(seed, size=64, quantize=True, conc_range=(0.05, 1.0)):
    rng = make_rng(seed)
    jitter = rng.normal(0, 0.05, (2, 3))
    h = np.clip(H + jitter[0], 0.01, None)
    e = np.clip(E + jitter[1], 0.01, None)
    stains = np.array([h / np.linalg.norm(h), e / np.linalg.norm(e)])
    conc = rng.uniform(*conc_range, (size * size, 2))
    kind = rng.random(size * size)
    conc[kind < 0.1, 1] = 0.0                        # pure hematoxylin
    conc[(kind >= 0.1) & (kind < 0.2), 0] = 0.0      # pure eosin
    conc[kind >= 0.85] = 0.0                         # background
    od = conc @ stains
    rgb = 256.0 * 10.0 ** (-od) - 1.0
    if quantize:
        rgb = np.clip(np.round(rgb), 0, 255)
    return rgb.reshape(size, size, 3), stains


def angle_deg(u, v):
    return np.degrees(np.arccos(np.clip(u @ v / np.linalg.norm(u) / np.linalg.norm(v), -1, 1)))


ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line for the summary."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (ok, detail)
        print(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}")
