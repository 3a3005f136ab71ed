"""Wide-baseline stereo with learned matching costs.

Conventions
-----------
* The left image is the reference; pixel ``(y, x)`` with disparity ``d``
  matches right-image pixel ``(y, x - d)``.
* A pixel's patch is the ``S x S`` window with top-left ``(y - S//2, x - S//2)``.
  Pixels whose window leaves the image are invalid and carry zero cost.
* Disparities whose right window leaves the image get a sentinel cost of
  ``max(valid costs of that pixel) + 1``.
* Lower cost is a better match for every cost volume.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .layers import ShapeError
from .models import MatchingMode, ModeError, ModelKind, PatchModel
from .network import dense_field


@dataclass
class RectifiedPair:
    left: np.ndarray
    right: np.ndarray
    d_max: int

    def __post_init__(self):
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        if self.left.shape != self.right.shape or self.left.ndim != 2:
            raise ShapeError(f"stereo images must be equal-size 2D arrays, got "
                             f"{self.left.shape} and {self.right.shape}")
        if not 1 <= self.d_max < self.left.shape[1]:
            raise ValueError(f"d_max must be in [1, width), got {self.d_max}")


@dataclass
class MRFParams:
    lambda1: float = 0.01
    lambda2: float = 0.2
    sigma: float = 7.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


@dataclass
class CostVolume:
    values: np.ndarray  # H x W x (d_max + 1)
    valid: np.ndarray  # H x W, window inside the image
    provenance: str = ""

    @property
    def d_max(self) -> int:
        return self.values.shape[2] - 1


@dataclass
class EdgeWeightField:
    horizontal: np.ndarray  # H x (W-1): edge (y,x)-(y,x+1)
    vertical: np.ndarray  # (H-1) x W: edge (y,x)-(y+1,x)


@dataclass
class DisparityMap:
    values: np.ndarray  # H x W int
    valid: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(np.int64)
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)


@dataclass
class DescriptorField:
    """Descriptor of every window: ``values[i, j]`` describes the window with
    top-left ``(i, j)``; the window centre is at ``(i + window//2, j + window//2)``."""

    values: np.ndarray  # nh x nw x L
    window: int
    net_stride: int


# -- edge weights ------------------------------------------------------------

def gradient_magnitude(image):
    """Euclidean norm of central differences (one-sided at the border)."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def edge_weights(image, params: MRFParams = MRFParams()) -> EdgeWeightField:
    """``lambda1 + lambda2 * exp(-|grad I(p)| / sigma^2)`` for every 4-neighbour edge,
    evaluated at the edge's top/left endpoint ``p``. Intensities on the 0..255 scale."""
    w = params.lambda1 + params.lambda2 * np.exp(-gradient_magnitude(image) / params.sigma ** 2)
    return EdgeWeightField(w[:, :-1].copy(), w[:-1, :].copy())


def uniform_edge_weights(shape, value) -> EdgeWeightField:
    H, W = shape
    return EdgeWeightField(np.full((H, W - 1), float(value)), np.full((H - 1, W), float(value)))


# -- dense evaluation --------------------------------------------------------

def _avgpool2(img):
    C, H, W = img.shape
    h, w = H // 2, W // 2
    img = img[:, :2 * h, :2 * w]
    return 0.25 * (img[:, 0::2, 0::2] + img[:, 1::2, 0::2] + img[:, 0::2, 1::2] + img[:, 1::2, 1::2])


def _two_stream_field(central, surround, image, S):
    """Central+surround features of every S x S window of ``image`` (C x H x W)."""
    C, H, W = image.shape
    nh, nw = H - S + 1, W - S + 1
    q, half = S // 4, S // 2
    fc = dense_field(central, image[:, q:q + nh - 1 + half, q:q + nw - 1 + half], half)
    fs = None
    for py in (0, 1):
        for px in (0, 1):
            if py >= nh or px >= nw:
                continue
            down = _avgpool2(image[:, py:, px:]).astype(image.dtype)
            f = dense_field(surround, down, half)
            ry, rx = len(range(py, nh, 2)), len(range(px, nw, 2))
            if fs is None:
                fs = np.empty((f.shape[0], nh, nw), dtype=f.dtype)
            fs[:, py::2, px::2] = f[:, :ry, :rx]
    return np.concatenate([fc.reshape(fc.shape[0], nh, nw), fs], axis=0)


def _prepare(model: PatchModel, image):
    img = np.asarray(image)
    if model.normalization is not None:
        img = model.normalization.apply(img)
    return img.astype(model.dtype, copy=False)


def dense_descriptors(model: PatchModel, image, branch=0, normalize=None) -> DescriptorField:
    """Descriptors of every window of ``image`` computed fully convolutionally.

    ``image`` is raw (the model's normalisation is applied here). Every entry
    equals :meth:`PatchModel.extract_descriptor` of the corresponding window.
    """
    if model.kind.is_two_channel:
        raise ModeError(f"{model.kind.value} does not produce descriptors")
    S = model.patch_size
    img = _prepare(model, image)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2D grayscale image, got shape {img.shape}")
    if img.shape[0] < S or img.shape[1] < S:
        raise ShapeError(f"image {img.shape[0]}x{img.shape[1]} is smaller than the {S}x{S} window")
    n = model.nets
    if model.kind is ModelKind.SIAM_2STREAM:
        f = _two_stream_field(n["central"], n["surround"], img[None], S)
        stride = n["central"].stride
    else:
        net = n["branch"] if "branch" in n else n[f"branch{branch}"]
        f = dense_field(net, img[None], S)
        stride = net.stride
    values = np.moveaxis(f, 0, -1)
    if normalize is None:
        normalize = model.mode is MatchingMode.L2
    if normalize:
        norm = np.sqrt(np.sum(values.astype(np.float64) ** 2, axis=-1, keepdims=True))
        if np.any(norm == 0):
            raise ValueError("zero descriptor cannot be l2-normalised")
        values = (values / norm).astype(values.dtype)
    return DescriptorField(values, S, stride)


def _empty_volume(pair, S):
    H, W = pair.left.shape
    D = pair.d_max + 1
    values = np.full((H, W, D), np.nan)
    valid = np.zeros((H, W), dtype=bool)
    h = S // 2
    if H >= S and W >= S:
        valid[h:H - S + h + 1, h:W - S + h + 1] = True
    return values, valid


def _finish_volume(values, valid, provenance):
    vals = np.where(valid[:, :, None], values, np.nan)
    have = ~np.isnan(vals)
    pix_max = np.where(have, vals, -np.inf).max(axis=2)
    sentinel = np.where(np.isfinite(pix_max), pix_max + 1.0, 0.0)
    out = np.where(have, vals, sentinel[:, :, None])
    out[~valid] = 0.0
    return CostVolume(out, valid, provenance)


def cost_volume_2ch(model: PatchModel, pair: RectifiedPair) -> CostVolume:
    """``C(p, d) = -score(left patch at p, right patch at p - d)`` for 2-channel kinds."""
    if not model.kind.is_two_channel:
        raise ModeError(f"cost_volume_2ch needs a 2-channel model, got {model.kind.value}")
    S = model.patch_size
    h = S // 2
    H, W = pair.left.shape
    if H < S or W < S:
        raise ShapeError(f"images {H}x{W} are smaller than the {S}x{S} window")
    left, right = _prepare(model, pair.left), _prepare(model, pair.right)
    values, valid = _empty_volume(pair, S)
    nh = H - S + 1
    for d in range(pair.d_max + 1):
        if W - d < S:
            break
        stacked = np.stack([left[:, d:], right[:, :W - d]])
        if model.kind is ModelKind.TWO_CH_2STREAM:
            n = model.nets
            feats = _two_stream_field(n["central"], n["surround"], stacked, S)
            L, a, b = feats.shape
            scores = n["top"].forward(feats.reshape(L, -1).T)[:, 0].reshape(a, b)
            n["top"].clear_cache()
        else:
            scores = dense_field(model.nets["net"], stacked, S)[0]
        nw = scores.shape[1]
        values[h:h + nh, h + d:h + d + nw, d] = -scores
    return _finish_volume(values, valid, f"{model.kind.value}:-score")


def cost_volume_siam(model: PatchModel, pair: RectifiedPair, mode=None) -> CostVolume:
    """Descriptor-based cost volume.

    ``mode`` decision: ``-top(D1(p), D2(p - d))``; l2: ``|D1(p) - D2(p - d)|``.
    Descriptors are computed once per image.
    """
    mode = MatchingMode(mode if mode is not None else model.mode)
    if model.kind.is_two_channel:
        raise ModeError(f"{model.kind.value} does not produce descriptors")
    S = model.patch_size
    h = S // 2
    l2 = mode is MatchingMode.L2
    # pseudo-siamese: both branches for the decision layer, branch 0 alone for l2
    right_branch = 1 if (model.kind is ModelKind.PSEUDO_SIAM and not l2) else 0
    DL = dense_descriptors(model, pair.left, branch=0, normalize=l2).values
    DR = dense_descriptors(model, pair.right, branch=right_branch, normalize=l2).values
    values, valid = _empty_volume(pair, S)
    nh, nw = DL.shape[:2]
    for d in range(min(pair.d_max, nw - 1) + 1):
        a, b = DL[:, d:], DR[:, :nw - d]
        if l2:
            cost = np.linalg.norm(a.astype(np.float64) - b, axis=-1)
        else:
            L = a.shape[-1]
            cost = -model.score_descriptors(a.reshape(-1, L), b.reshape(-1, L)).reshape(nh, nw - d)
        values[h:h + nh, h + d:h + nw, d] = cost
    return _finish_volume(values, valid, f"{model.kind.value}:{'l2' if l2 else '-top'}")


def cost_volume(model: PatchModel, pair: RectifiedPair, mode=None) -> CostVolume:
    if model.kind.is_two_channel:
        if mode is not None and MatchingMode(mode) is MatchingMode.L2:
            raise ModeError(f"{model.kind.value} has no descriptors; l2 cost is unavailable")
        return cost_volume_2ch(model, pair)
    return cost_volume_siam(model, pair, mode)


# -- disparity optimisation -----------------------------------------------------

def wta(cv: CostVolume) -> DisparityMap:
    """Per-pixel argmin; ties go to the smallest disparity."""
    return DisparityMap(np.argmin(cv.values, axis=2), cv.valid.copy())


def _values(d):
    return d.values if isinstance(d, DisparityMap) else np.asarray(d, dtype=np.int64)


def mrf_energy(d, cv: CostVolume, ew: EdgeWeightField) -> float:
    """Unary costs plus weighted absolute disparity differences over 4-neighbour edges."""
    lab = _values(d)
    H, W, _ = cv.values.shape
    if lab.shape != (H, W):
        raise ShapeError(f"disparity map {lab.shape} does not match cost volume {(H, W)}")
    if ew.horizontal.shape != (H, W - 1) or ew.vertical.shape != (H - 1, W):
        raise ShapeError("edge weight field does not match the cost volume")
    unary = np.take_along_axis(cv.values, lab[:, :, None], axis=2).sum()
    pair = np.sum(ew.horizontal * np.abs(np.diff(lab, axis=1))) + \
        np.sum(ew.vertical * np.abs(np.diff(lab, axis=0)))
    return float(unary + pair)


def _l1_envelope(f, w):
    """``min_d' f[..., d'] + w * |d - d'|`` along the last axis (w broadcast per row)."""
    g = f.copy()
    w = np.asarray(w)[..., None] if np.ndim(w) else w
    D = g.shape[-1]
    for d in range(1, D):
        g[..., d:d + 1] = np.minimum(g[..., d:d + 1], g[..., d - 1:d] + w)
    for d in range(D - 2, -1, -1):
        g[..., d:d + 1] = np.minimum(g[..., d:d + 1], g[..., d + 1:d + 2] + w)
    return g


def chain_optimum(costs, weights):
    """Exact minimiser of a chain energy by dynamic programming.

    :param costs: ``n x D`` unary costs.
    :param weights: ``n - 1`` edge weights.
    """
    costs = np.asarray(costs, dtype=np.float64)
    n, D = costs.shape
    labels = np.arange(D)
    jump = np.abs(labels[:, None] - labels[None, :])  # [d, d']
    M = costs[0].copy()
    back = np.zeros((n, D), dtype=np.int64)
    for i in range(1, n):
        cand = M[None, :] + weights[i - 1] * jump
        back[i] = np.argmin(cand, axis=1)
        M = costs[i] + cand[labels, back[i]]
    out = np.empty(n, dtype=np.int64)
    out[-1] = int(np.argmin(M))
    for i in range(n - 1, 0, -1):
        out[i - 1] = back[i, out[i]]
    return out


def semi_global(cv: CostVolume, ew: EdgeWeightField):
    """Sum of four scanline aggregations (left, right, down, up)."""
    C = cv.values.astype(np.float64)
    H, W, D = C.shape
    total = np.zeros_like(C)
    # horizontal passes: scan columns, edges from ew.horizontal[:, x-1]
    for direction in (1, -1):
        L = np.empty_like(C)
        xs = range(W) if direction == 1 else range(W - 1, -1, -1)
        prev = None
        for x in xs:
            if prev is None:
                L[:, x] = C[:, x]
            else:
                w = ew.horizontal[:, min(x, prev)]
                Lp = L[:, prev]
                L[:, x] = C[:, x] + _l1_envelope(Lp, w) - Lp.min(axis=1, keepdims=True)
            prev = x
        total += L
    for direction in (1, -1):
        L = np.empty_like(C)
        ys = range(H) if direction == 1 else range(H - 1, -1, -1)
        prev = None
        for y in ys:
            if prev is None:
                L[y] = C[y]
            else:
                w = ew.vertical[min(y, prev), :]
                Lp = L[prev]
                L[y] = C[y] + _l1_envelope(Lp, w) - Lp.min(axis=1, keepdims=True)
            prev = y
        total += L
    return total


def _icm(lab, cv, ew, max_sweeps=50):
    """Checkerboard coordinate descent; never increases the energy."""
    C = cv.values
    H, W, D = C.shape
    labels = np.arange(D)
    yy, xx = np.mgrid[0:H, 0:W]
    lab = lab.copy()
    for _ in range(max_sweeps):
        changed = False
        for color in (0, 1):
            local = C.astype(np.float64).copy()
            if W > 1:
                local[:, 1:] += ew.horizontal[:, :, None] * np.abs(labels - lab[:, :-1, None])
                local[:, :-1] += ew.horizontal[:, :, None] * np.abs(labels - lab[:, 1:, None])
            if H > 1:
                local[1:] += ew.vertical[:, :, None] * np.abs(labels - lab[:-1, :, None])
                local[:-1] += ew.vertical[:, :, None] * np.abs(labels - lab[1:, :, None])
            best = np.argmin(local, axis=2)
            cur = np.take_along_axis(local, lab[:, :, None], axis=2)[:, :, 0]
            better = (np.take_along_axis(local, best[:, :, None], axis=2)[:, :, 0] < cur) & \
                ((yy + xx) % 2 == color)
            if np.any(better):
                lab[better] = best[better]
                changed = True
        if not changed:
            break
    return lab


def optimize_mrf(cv: CostVolume, ew: EdgeWeightField) -> DisparityMap:
    """Approximate minimiser of :func:`mrf_energy`.

    Single-row or single-column grids are solved exactly by dynamic
    programming. Otherwise four-direction semi-global aggregation gives an
    initial labelling; if it scores worse than winner-takes-all the WTA map is
    used instead, and checkerboard coordinate descent then polishes the
    result. The returned energy is never above the WTA energy.
    """
    H, W, D = cv.values.shape
    base = wta(cv)
    if not (np.any(ew.horizontal) or np.any(ew.vertical)):
        return base
    if H == 1:
        return DisparityMap(chain_optimum(cv.values[0], ew.horizontal[0])[None, :], cv.valid.copy())
    if W == 1:
        return DisparityMap(chain_optimum(cv.values[:, 0], ew.vertical[:, 0])[:, None], cv.valid.copy())
    sgm = np.argmin(semi_global(cv, ew), axis=2)
    e_wta = mrf_energy(base, cv, ew)
    start = sgm if mrf_energy(sgm, cv, ew) <= e_wta else base.values
    lab = _icm(start, cv, ew)
    if mrf_energy(lab, cv, ew) > e_wta:
        lab = base.values
    return DisparityMap(lab, cv.valid.copy())


# -- evaluation ---------------------------------------------------------------

DEFAULT_THRESHOLDS = (1, 3, 5)


def error_stats(d: DisparityMap, gt: DisparityMap, occlusion_mask=None, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of pixels within each error threshold.

    :return: list of ``(threshold, fraction_all, fraction_unoccluded)``;
        pixels with unknown ground truth or invalid estimates are skipped.
    """
    est, ref = _values(d), _values(gt)
    if est.shape != ref.shape:
        raise ShapeError(f"disparity map {est.shape} does not match ground truth {ref.shape}")
    evaluated = np.ones(est.shape, dtype=bool)
    if isinstance(d, DisparityMap):
        evaluated &= d.valid
    if isinstance(gt, DisparityMap):
        evaluated &= gt.valid
    occ = np.zeros(est.shape, dtype=bool) if occlusion_mask is None else np.asarray(occlusion_mask, bool)
    if occ.shape != est.shape:
        raise ShapeError(f"occlusion mask {occ.shape} does not match {est.shape}")
    err = np.abs(est - ref)
    rows = []
    for t in thresholds:
        ok = err <= t
        n_all = evaluated.sum()
        unocc = evaluated & ~occ
        f_all = ok[evaluated].mean() if n_all else float("nan")
        f_un = ok[unocc].mean() if unocc.any() else float("nan")
        rows.append((t, float(f_all), float(f_un)))
    return rows


def write_error_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fraction_all", "fraction_unoccluded"])
        for t, a, u in rows:
            w.writerow([t, f"{a:.10g}", f"{u:.10g}"])


# -- disparity files -------------------------------------------------------------

PGM_INVALID = 65535


def disparity_scale(d_max) -> int:
    return 256 if (d_max + 1) * 256 < PGM_INVALID else 1


def write_disparity_pgm(path, dmap: DisparityMap, d_max):
    """16-bit binary PGM of ``d * scale`` (invalid pixels 65535) plus a
    ``<path>.txt`` sidecar recording the scale."""
    scale = disparity_scale(d_max)
    v = dmap.values.astype(np.int64) * scale
    v = np.where(dmap.valid, v, PGM_INVALID).astype(">u2")
    H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        fh.write(v.tobytes())
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"scale={scale}\ninvalid={PGM_INVALID}\nd_max={d_max}\n")
    return scale


def read_disparity_pgm(path) -> DisparityMap:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    raw = np.frombuffer(data[pos:pos + 2 * W * H], dtype=">u2")
    if raw.size != W * H:
        raise ValueError(f"{path}: truncated PGM")
    v = raw.reshape(H, W).astype(np.int64)
    scale = 1
    try:
        with open(str(path) + ".txt") as fh:
            for line in fh:
                k, _, val = line.strip().partition("=")
                if k == "scale":
                    scale = int(val)
    except FileNotFoundError:
        pass
    valid = v != PGM_INVALID
    return DisparityMap(np.where(valid, v // scale, 0), valid)


def write_disparity_bin(path, dmap: DisparityMap, d_max):
    """Header of three little-endian int32 (H, W, d_max) then H*W float32; NaN marks invalid."""
    H, W = dmap.values.shape
    v = np.where(dmap.valid, dmap.values.astype(np.float32), np.float32(np.nan)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", H, W, d_max))
        fh.write(v.tobytes())


def read_disparity_bin(path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise ValueError(f"{path}: truncated header")
        H, W, d_max = struct.unpack("<3i", head)
        v = np.frombuffer(fh.read(), dtype="<f4")
    if v.size != H * W:
        raise ValueError(f"{path}: expected {H * W} values, got {v.size}")
    v = v.reshape(H, W)
    valid = ~np.isnan(v)
    return DisparityMap(np.where(valid, v, 0).astype(np.int64), valid), d_max
