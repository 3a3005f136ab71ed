"""Independent oracles and finite-difference machinery shared by the tests."""
import itertools

import numpy as np

from patchcompare.layers import SPP, Conv2d, Flatten, Linear, MaxPool2d, ReLU

EPS = 1e-5
REL_TOL = 1e-4
# Entries whose analytic and numeric magnitudes are both below this floor are
# compared on an absolute scale; central differences carry ~1e-10 absolute noise.
DENOM_FLOOR = 1e-6


def rel_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)


def _central(f, arr, idx, eps=EPS):
    old = arr[idx]
    arr[idx] = old + eps
    fp = f()
    arr[idx] = old - eps
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * eps)


def numeric_grad(f, arr, indices, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at ``indices``.

    Also flags coordinates where the ``eps`` and ``eps/10`` central
    differences disagree. On a smooth stretch they agree to ~1e-10, so a
    disagreement means the perturbation crossed a ReLU or max-pool kink and
    the coordinate is not differentiable at this scale.
    """
    out, kinked = [], []
    for idx in indices:
        c = _central(f, arr, idx, eps)
        fine = _central(f, arr, idx, eps / 10)
        out.append(c)
        kinked.append(abs(c - fine) > 1e-8 + 1e-6 * abs(fine))
    return np.array(out), np.array(kinked)


def sample_indices(shape, rng, k):
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def separated_values(rng, shape, gap=1e-2):
    """Random values whose pairwise gaps and distance from zero exceed ``gap``.

    Keeps max-pool winners and ReLU signs stable under ``EPS`` perturbations.
    """
    n = int(np.prod(shape))
    base = (np.arange(n) - n / 2 + 0.5) * gap * 3
    base = rng.permutation(base)
    return (base + rng.uniform(-gap, gap, n)).reshape(shape)


def random_layer(kind, rng):
    """A random float64 layer of ``kind`` and a matching input batch."""
    N = int(rng.integers(1, 3))
    if kind == "Conv":
        c, n, k = (int(v) for v in rng.integers(1, 4, size=3))
        s = int(rng.integers(1, 3))
        H = int(rng.integers(k, k + 5))
        W = int(rng.integers(k, k + 5))
        layer = Conv2d(c, n, k, s, rng=rng, dtype=np.float64)
        return layer, rng.standard_normal((N, c, H, W))
    if kind == "MaxPool":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        C = int(rng.integers(1, 3))
        H = int(rng.integers(k, k + 5))
        W = int(rng.integers(k, k + 5))
        return MaxPool2d(k, s), separated_values(rng, (N, C, H, W))
    if kind == "ReLU":
        return ReLU(), separated_values(rng, (N, 2, 3, 4))
    if kind == "Linear":
        a, b = (int(v) for v in rng.integers(1, 8, size=2))
        return Linear(a, b, rng=rng, dtype=np.float64), rng.standard_normal((N, a))
    if kind == "Flatten":
        return Flatten(), rng.standard_normal((N, 2, 3, 2))
    if kind == "SPP":
        g = int(rng.integers(1, 4))
        H = int(rng.integers(g, g + 6))
        W = int(rng.integers(g, g + 6))
        return SPP(g), separated_values(rng, (N, 2, H, W))
    raise ValueError(kind)


LAYER_KINDS = ("Conv", "MaxPool", "ReLU", "Linear", "Flatten", "SPP")


def check_layer_gradient(kind, seed):
    """Worst relative error between analytic and numeric gradients of one instance."""
    rng = np.random.default_rng(seed)
    layer, x = random_layer(kind, rng)
    R = rng.standard_normal(layer.forward(x).shape)

    def f():
        return float(np.sum(layer.forward(x) * R))

    layer.forward(x)
    dx, grads = layer.backward(R)
    worst = 0.0
    targets = [(x, dx)] + [(layer.params[k], grads[k]) for k in layer.params]
    for arr, analytic in targets:
        idx = list(itertools.product(*(range(d) for d in arr.shape)))
        num, _ = numeric_grad(f, arr, idx)
        ana = np.array([analytic[i] for i in idx])
        worst = max(worst, float(rel_error(ana, num).max()))
    return worst


def check_model_gradient(model, P1, P2, rng, per_tensor=4):
    """Worst relative error over sampled parameter coordinates of a whole model.

    The objective is a fixed random linear functional of the scores, so every
    parameter kind (shared branches, two-stream halves, top) is exercised.
    Coordinates whose perturbation crosses a kink are resampled.
    """
    r = rng.standard_normal(len(P1))

    def f():
        return float(np.dot(model.forward_batch(P1, P2), r))

    model.zero_grad()
    model.forward_batch(P1, P2)
    model.backward(r)
    worst, checked = 0.0, 0
    seen = set()
    for name, layer, key in model.parameters():
        if id(layer.params[key]) in seen:
            continue
        seen.add(id(layer.params[key]))
        arr = layer.params[key]
        analytic = layer.grads[key].copy()
        got = 0
        for idx in sample_indices(arr.shape, rng, 4 * per_tensor):
            num, kinked = numeric_grad(f, arr, [idx])
            if kinked[0]:
                continue
            worst = max(worst, float(rel_error(analytic[idx], num[0])))
            got += 1
            if got == per_tensor:
                break
        checked += got
    return worst, checked


# -- ROC oracle ------------------------------------------------------------------

def brute_force_fpr95(scores, labels, recall=0.95, higher_is_similar=True):
    """FPR at ``recall`` by enumerating every threshold and interpolating.

    Written independently of the library: for each candidate threshold t,
    predict "match" iff the similarity >= t.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not higher_is_similar:
        s = -s
    y = np.asarray(labels) > 0
    P, N = y.sum(), (~y).sum()
    pts = {(0.0, 0.0)}
    for t in np.unique(s):
        pred = s >= t
        pts.add(((pred & ~y).sum() / N, (pred & y).sum() / P))
    pts = sorted(pts)
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    for i in range(len(tpr)):
        if tpr[i] >= recall:
            if i == 0 or tpr[i] == tpr[i - 1]:
                return float(fpr[i])
            w = (recall - tpr[i - 1]) / (tpr[i] - tpr[i - 1])
            return float(fpr[i - 1] + w * (fpr[i] - fpr[i - 1]))
    return 1.0


# -- MRF oracle -------------------------------------------------------------------

def energy_oracle(labels, unary, wh, wv):
    """Energy by explicit loops over pixels and edges."""
    H, W = labels.shape
    e = 0.0
    for y in range(H):
        for x in range(W):
            e += unary[y, x, labels[y, x]]
            if x + 1 < W:
                e += wh[y, x] * abs(int(labels[y, x]) - int(labels[y, x + 1]))
            if y + 1 < H:
                e += wv[y, x] * abs(int(labels[y, x]) - int(labels[y + 1, x]))
    return e


def direct_hinge(o, y, weights, lam):
    """Summed hinge loss plus the weight penalty, one scalar at a time."""
    total = 0.0
    for oi, yi in zip(o, y):
        total += max(0.0, 1.0 - yi * oi)
    sq = 0.0
    for w in weights:
        for v in np.ravel(w):
            sq += v * v
    return total + lam / 2 * sq


# -- synthetic pair sets -----------------------------------------------------------

def separable_pairs(n_pairs, size, seed, noise=0.05):
    """Half noisy copies (label +1), half unrelated random patches (label -1)."""
    from patchcompare.training import LabeledPair
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        a = rng.standard_normal((size, size))
        if i % 2 == 0:
            b = a + noise * rng.standard_normal((size, size))
            pairs.append(LabeledPair(a, b, 1))
        else:
            pairs.append(LabeledPair(a, rng.standard_normal((size, size)), -1))
    return pairs


def shifted_scene(H, W, shift, seed):
    """Random texture pair in which every left pixel x appears at x - shift on the right."""
    rng = np.random.default_rng(seed)
    wide = rng.random((H, W + shift))
    return wide[:, :W], wide[:, shift:shift + W]


def standardized_scene(H, W, shift, seed):
    """:func:`shifted_scene` rescaled to roughly zero mean and unit variance."""
    left, right = shifted_scene(H, W, shift, seed)
    return (left - 0.5) / 0.29, (right - 0.5) / 0.29


def scene_pairs(left, right, shift, d_max, size):
    """Every window whose disparities 0..d_max all fit, paired at each disparity.

    Returns ``(positives, negatives)``; the positive sits at ``shift``.
    """
    from patchcompare.training import LabeledPair
    H, W = left.shape
    pos, neg = [], []
    for y in range(H - size + 1):
        for x in range(d_max, W - size + 1):
            a = left[y:y + size, x:x + size]
            for d in range(d_max + 1):
                pair = LabeledPair(a, right[y:y + size, x - d:x - d + size], 1 if d == shift else -1)
                (pos if d == shift else neg).append(pair)
    return pos, neg


def overfit_scene_model(kind, left, right, shift, d_max, seed=0, iterations=1500, learning_rate=0.0003):
    """Reduced model trained on balanced positive and negative windows of one scene."""
    from patchcompare.models import build_reduced_model
    from patchcompare.training import TrainConfig, train
    model = build_reduced_model(kind, seed=seed)
    pos, neg = scene_pairs(left, right, shift, d_max, model.patch_size)

    def sampler(batch_size, rng):
        half = batch_size // 2
        return ([pos[i] for i in rng.integers(0, len(pos), half)]
                + [neg[i] for i in rng.integers(0, len(neg), batch_size - half)])

    train(model, sampler, TrainConfig(iterations=iterations, learning_rate=learning_rate,
                                      batch_size=32, seed=seed))
    return model


def interior_mask(cv, d_max):
    """Valid pixels whose windows at every disparity lie inside the right image."""
    mask = cv.valid.copy()
    first = int(np.argmax(cv.valid.any(axis=0)))
    mask[:, :first + d_max] = False
    return mask


# -- acceptance reporting --------------------------------------------------------------

ACCEPTANCE_LINES = []
