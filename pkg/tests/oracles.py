"""Reference implementations shared by the unit and acceptance suites."""

import math

import numpy as np


def numeric_grad(f, x, h=1e-5, coords=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place and restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def max_rel_error(analytic, numeric: dict, floor=1e-6):
    flat = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for i, n in numeric.items():
        a = flat[i]
        worst = max(worst, abs(a - n) / max(abs(a) + abs(n), floor))
    return worst


def direct_conv(x, w, b):
    """Zero-padded 3x3 cross-correlation by explicit loops."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    out = np.zeros((n, k, h, wd))
    for i in range(n):
        for o in range(k):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for ci in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xq = y + dy - 1, xx + dx - 1
                                if 0 <= yy < h and 0 <= xq < wd:
                                    acc += x[i, ci, yy, xq] * w[o, ci, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def glcm_oracle(levels, mask, ng):
    """Every ordered pair of 26-neighbours inside the mask, counted once."""
    nx, ny, nz = mask.shape
    m = [[0.0] * ng for _ in range(ng)]
    total = 0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            if dx == dy == dz == 0:
                                continue
                            a, b, c = x + dx, y + dy, z + dz
                            if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and mask[a, b, c]:
                                m[levels[x, y, z]][levels[a, b, c]] += 1
                                total += 1
    return [[v / total for v in row] for row in m]


def haralick_oracle(p):
    """Scalar-loop evaluation of the texture definitions, levels numbered from 1."""
    ng = len(p)
    lv = range(ng)
    px = [sum(p[i][j] for j in lv) for i in lv]
    py = [sum(p[i][j] for i in lv) for j in lv]
    mux = sum((i + 1) * px[i] for i in lv)
    muy = sum((j + 1) * py[j] for j in lv)
    sx = math.sqrt(sum((i + 1 - mux) ** 2 * px[i] for i in lv))
    sy = math.sqrt(sum((j + 1 - muy) ** 2 * py[j] for j in lv))
    cells = [(i, j, p[i][j]) for i in lv for j in lv]
    auto = sum((i + 1) * (j + 1) * v for i, j, v in cells)
    psum, pdiff = {}, {}
    for i, j, v in cells:
        psum[i + j + 2] = psum.get(i + j + 2, 0.0) + v
        pdiff[abs(i - j)] = pdiff.get(abs(i - j), 0.0) + v
    sa = sum(k * v for k, v in psum.items())
    da = sum(k * v for k, v in pdiff.items())

    def ent(vals):
        return -sum(v * math.log2(v) for v in vals if v > 0)

    hxy = ent(v for _, _, v in cells)
    hx, hy = ent(px), ent(py)
    hxy1 = -sum(v * math.log2(px[i] * py[j]) for i, j, v in cells if v > 0)
    hxy2 = -sum(px[i] * py[j] * math.log2(px[i] * py[j]) for i in lv for j in lv if px[i] * py[j] > 0)
    return {
        "energy": sum(v * v for _, _, v in cells),
        "contrast": sum((i - j) ** 2 * v for i, j, v in cells),
        "correlation": (auto - mux * muy) / (sx * sy) if sx * sy > 1e-12 else 0.0,
        "variance": sum((i + 1 - mux) ** 2 * v for i, j, v in cells),
        "homogeneity": sum(v / (1 + (i - j) ** 2) for i, j, v in cells),
        "sum_average": sa,
        "sum_variance": sum((k - sa) ** 2 * v for k, v in psum.items()),
        "sum_entropy": ent(psum.values()),
        "entropy": hxy,
        "difference_variance": sum((k - da) ** 2 * v for k, v in pdiff.items()),
        "difference_entropy": ent(pdiff.values()),
        "imc1": (hxy - hxy1) / max(hx, hy) if max(hx, hy) > 0 else 0.0,
        "imc2": math.sqrt(max(0.0, 1 - math.exp(-2 * (hxy2 - hxy)))),
        "autocorrelation": auto,
        "dissimilarity": sum(abs(i - j) * v for i, j, v in cells),
    }


def random_masked_volume(rng, max_side=4, ng=8):
    """Random levels on a <= max_side^3 grid with a random mask holding at least two neighbours."""
    while True:
        shape = tuple(int(s) for s in rng.integers(1, max_side + 1, size=3))
        mask = rng.random(shape) < 0.7
        if mask.sum() >= 2:
            idx = np.argwhere(mask)
            if any(np.abs(a - b).max() == 1 for a in idx for b in idx):
                return rng.integers(0, ng, size=shape), mask


# three models, eight lesions; no single model is perfect
HAND_LABELS = np.array([1, 1, 1, 1, 0, 0, 0, 0])
HAND_MATRIX = np.array([
    [0.90, 0.80, 0.30, 0.60, 0.70, 0.20, 0.10, 0.40],
    [0.40, 0.70, 0.90, 0.35, 0.30, 0.60, 0.20, 0.10],
    [0.55, 0.20, 0.60, 0.80, 0.50, 0.45, 0.65, 0.15],
])


def simulate(matrix, labels, max_iters, patience, tol=1e-6):
    """Step-by-step reference: weights from counts, explicit weighted average."""
    m = len(matrix)
    counts = [0] * m
    trace, cur, stalls = [], None, 0
    for _ in range(max_iters):
        cands = []
        for i in range(m):
            c = counts.copy()
            c[i] += 1
            blend = [sum(c[j] * matrix[j][k] for j in range(m)) / sum(c) for k in range(len(labels))]
            cands.append(pair_count_auc(blend, labels))
        best = max(range(m), key=lambda i: (cands[i], -i))
        gain = cands[best] - (cur if cur is not None else -1)
        if gain < 0:
            break
        counts[best] += 1
        cur = cands[best]
        trace.append(cur)
        stalls = stalls + 1 if gain < tol else 0
        if stalls >= patience:
            break
    return counts, trace
