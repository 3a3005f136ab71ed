"""Patch-comparison networks: 2-channel, siamese, pseudo-siamese and variants.

All batched entry points take preprocessed patches shaped ``N x S x S``
(a singleton channel axis ``N x 1 x S x S`` is also accepted).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import arch as A
from .layers import CacheError, ShapeError, l2_normalize
from .network import Sequential


class ModelKind(str, Enum):
    TWO_CH = "2ch"
    TWO_CH_DEEP = "2ch-deep"
    TWO_CH_2STREAM = "2ch-2stream"
    SIAM = "siam"
    PSEUDO_SIAM = "pseudo-siam"
    SIAM_2STREAM = "siam-2stream"
    SIAM_SPP = "siam-spp"

    @property
    def is_two_channel(self) -> bool:
        return self in (ModelKind.TWO_CH, ModelKind.TWO_CH_DEEP, ModelKind.TWO_CH_2STREAM)

    @property
    def is_two_stream(self) -> bool:
        return self in (ModelKind.TWO_CH_2STREAM, ModelKind.SIAM_2STREAM)


class MatchingMode(str, Enum):
    DECISION = "decision"
    L2 = "l2"


class ModeError(ValueError):
    """Operation not available for this model kind or matching mode."""


SIAM_BRANCH = "C(96,7,3)-ReLU-P(2,2)-C(192,5,1)-ReLU-P(2,2)-C(256,3,1)-ReLU"
SIAM_2STREAM_BRANCH = "C(96,4,2)-ReLU-P(2,2)-C(192,3,1)-ReLU-C(256,3,1)-ReLU-C(256,3,1)-ReLU"
TWO_CH_2STREAM_BRANCH = "C(95,5,1)-ReLU-P(2,2)-C(96,3,1)-ReLU-P(2,2)-C(192,3,1)-ReLU-C(192,3,1)-ReLU"
TWO_CH_NET = ("C(96,7,3)-ReLU-P(2,2)-C(192,5,1)-ReLU-P(2,2)-C(256,3,1)-ReLU-"
              "F(256)-ReLU-F(1)")
TWO_CH_DEEP_NET = "C(96,4,3)-Stack(96)-P(2,2)-Stack(192)-F(1)"
# pooling dropped so the trunk keeps at least 4x4 extent down to 34x34 inputs
SIAM_SPP_BRANCH = "C(96,7,3)-ReLU-C(192,5,1)-ReLU-C(256,3,1)-ReLU-SPP(4)"
DECISION_TOP = "F(512)-ReLU-F(1)"

DEFAULT_ARCHS = {
    ModelKind.TWO_CH: {"net": TWO_CH_NET},
    ModelKind.TWO_CH_DEEP: {"net": TWO_CH_DEEP_NET},
    ModelKind.TWO_CH_2STREAM: {"branch": TWO_CH_2STREAM_BRANCH, "top": "F(768)-ReLU-F(1)"},
    ModelKind.SIAM: {"branch": SIAM_BRANCH, "top": DECISION_TOP},
    ModelKind.PSEUDO_SIAM: {"branch": SIAM_BRANCH, "top": DECISION_TOP},
    ModelKind.SIAM_2STREAM: {"branch": SIAM_2STREAM_BRANCH, "top": DECISION_TOP},
    ModelKind.SIAM_SPP: {"branch": SIAM_SPP_BRANCH, "top": DECISION_TOP},
}

# The nine benchmark configurations: name -> (kind, mode).
CONFIGURATIONS = {
    "2ch-2stream": (ModelKind.TWO_CH_2STREAM, MatchingMode.DECISION),
    "2ch-deep": (ModelKind.TWO_CH_DEEP, MatchingMode.DECISION),
    "2ch": (ModelKind.TWO_CH, MatchingMode.DECISION),
    "siam": (ModelKind.SIAM, MatchingMode.DECISION),
    "siam-l2": (ModelKind.SIAM, MatchingMode.L2),
    "pseudo-siam": (ModelKind.PSEUDO_SIAM, MatchingMode.DECISION),
    "pseudo-siam-l2": (ModelKind.PSEUDO_SIAM, MatchingMode.L2),
    "siam-2stream": (ModelKind.SIAM_2STREAM, MatchingMode.DECISION),
    "siam-2stream-l2": (ModelKind.SIAM_2STREAM, MatchingMode.L2),
}


def configuration_strings() -> dict[str, str]:
    """Architecture string of each benchmark configuration.

    Decision-layer configurations carry ``branch-top``; l2 ones are a single
    branch.
    """
    out = {}
    for name, (kind, mode) in CONFIGURATIONS.items():
        archs = DEFAULT_ARCHS[kind]
        if "net" in archs:
            out[name] = archs["net"]
        elif mode is MatchingMode.L2:
            out[name] = archs["branch"]
        else:
            out[name] = archs["branch"] + "-" + archs["top"]
    return out


# Small variants used for gradient checks and desk-scale experiments on 16x16 inputs.
REDUCED_ARCHS = {
    ModelKind.TWO_CH: {"net": "C(4,3,1)-ReLU-P(2,2)-C(8,3,1)-ReLU-P(2,2)-C(8,2,1)-ReLU-F(8)-ReLU-F(1)"},
    ModelKind.TWO_CH_DEEP: {"net": "C(4,3,1)-Stack(4)-P(2,2)-F(1)"},
    ModelKind.TWO_CH_2STREAM: {"branch": "C(4,3,1)-ReLU-P(2,2)-C(8,2,1)-ReLU", "top": "F(8)-ReLU-F(1)"},
    ModelKind.SIAM: {"branch": "C(4,3,1)-ReLU-P(2,2)-C(8,3,1)-ReLU-P(2,2)-C(8,2,1)-ReLU",
                     "top": "F(8)-ReLU-F(1)"},
    ModelKind.PSEUDO_SIAM: {"branch": "C(4,3,1)-ReLU-P(2,2)-C(8,3,1)-ReLU-P(2,2)-C(8,2,1)-ReLU",
                            "top": "F(8)-ReLU-F(1)"},
    ModelKind.SIAM_2STREAM: {"branch": "C(4,3,1)-ReLU-P(2,2)-C(8,2,1)-ReLU", "top": "F(8)-ReLU-F(1)"},
    ModelKind.SIAM_SPP: {"branch": "C(4,3,1)-ReLU-C(8,3,1)-ReLU-SPP(2)", "top": "F(8)-ReLU-F(1)"},
}
REDUCED_PATCH_SIZE = 16


@dataclass
class Descriptor:
    values: np.ndarray
    normalized: bool = False

    def __len__(self):
        return len(self.values)


def split_streams(patch, size=None):
    """Central crop and 2x downsampled surround of a square patch.

    For a 64x64 patch the central stream is rows/cols 16..47 and the surround
    is the 2x2 average pool of the whole patch; both are 32x32.
    """
    patch = np.asarray(patch)
    if patch.ndim == 3 and patch.shape[0] == 1:
        patch = patch[0]
    n = patch.shape[-1]
    if patch.ndim != 2 or patch.shape[0] != n or n % 4:
        raise ShapeError(f"split_streams: expected a square patch with side divisible by 4, got {patch.shape}")
    if size is not None and n != size:
        raise ShapeError(f"split_streams: expected a {size}x{size} patch, got {n}x{n}")
    c, s = split_streams_batch(patch[None])
    return c[0], s[0]


def split_streams_batch(P):
    """Vectorised :func:`split_streams` over ``N x S x S``."""
    n = P.shape[-1]
    q = n // 4
    central = P[:, q:n - q, q:n - q]
    surround = 0.25 * (P[:, 0::2, 0::2] + P[:, 1::2, 0::2] + P[:, 0::2, 1::2] + P[:, 1::2, 1::2])
    return np.ascontiguousarray(central), surround.astype(P.dtype, copy=False)


def _flat(x):
    return x.reshape(x.shape[0], -1)


class PatchModel:
    """An executable patch-comparison network.

    ``nets`` maps role names to :class:`Sequential` chains. Roles per kind:

    ======================  ======================================
    2ch, 2ch-deep           ``net``
    2ch-2stream             ``central``, ``surround``, ``top``
    siam, siam-spp          ``branch``, ``top``
    pseudo-siam             ``branch0``, ``branch1``, ``top``
    siam-2stream            ``central``, ``surround``, ``top``
    ======================  ======================================

    Siamese sharing is realised by routing both patches through the same
    chain object, so shared weights are literally the same arrays.
    """

    def __init__(self, kind, nets, patch_size=64, mode=MatchingMode.DECISION, seed=0,
                 archs=None, dtype=np.float32, normalization=None):
        self.kind = ModelKind(kind)
        self.mode = MatchingMode(mode)
        if self.mode is MatchingMode.L2 and self.kind.is_two_channel:
            raise ModeError(f"{self.kind.value} produces no descriptors; l2 matching is not available")
        self.nets = nets
        self.patch_size = patch_size
        self.seed = seed
        self.archs = dict(archs or {})
        self.dtype = np.dtype(dtype)
        self.normalization = normalization
        self._cache = None

    def __repr__(self):
        return f"PatchModel({self.kind.value}, mode={self.mode.value}, patch_size={self.patch_size})"

    # -- structure ----------------------------------------------------------

    @property
    def branches(self) -> list[Sequential]:
        """Branch chains in routing order (aliases repeat for shared branches)."""
        k = self.kind
        if k in (ModelKind.SIAM, ModelKind.SIAM_SPP):
            return [self.nets["branch"], self.nets["branch"]]
        if k is ModelKind.PSEUDO_SIAM:
            return [self.nets["branch0"], self.nets["branch1"]]
        if k is ModelKind.SIAM_2STREAM:
            c, s = self.nets["central"], self.nets["surround"]
            return [c, s, c, s]
        if k is ModelKind.TWO_CH_2STREAM:
            return [self.nets["central"], self.nets["surround"]]
        return [self.nets["net"]]

    @property
    def top(self):
        return self.nets.get("top")

    def parameters(self):
        """Yield ``(name, layer, key)`` once per distinct parameter array."""
        for role in sorted(self.nets):
            for name, layer, key in self.nets[role].parameters():
                yield f"{role}.{name}", layer, key

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.params[key] for name, layer, key in self.parameters()}

    def load_state_dict(self, state):
        for name, layer, key in self.parameters():
            value = np.asarray(state[name])
            if value.shape != layer.params[key].shape:
                raise ShapeError(f"{name}: expected shape {layer.params[key].shape}, got {value.shape}")
            layer.params[key][...] = value

    def zero_grad(self):
        for net in self.nets.values():
            net.zero_grad()

    def num_parameters(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.parameters())

    # -- input handling -------------------------------------------------------

    def _as_batch(self, P):
        P = np.asarray(P, dtype=self.dtype)
        if P.ndim == 4:
            if P.shape[1] != 1:
                raise ShapeError(f"expected single-channel patches, got shape {P.shape}")
            P = P[:, 0]
        if P.ndim == 2:
            P = P[None]
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ShapeError(f"expected N x S x S patches, got shape {P.shape}")
        if self.kind is not ModelKind.SIAM_SPP and P.shape[1] != self.patch_size:
            raise ShapeError(
                f"{self.kind.value} expects {self.patch_size}x{self.patch_size} patches, "
                f"got {P.shape[1]}x{P.shape[2]}")
        return P

    # -- decision-layer scoring ------------------------------------------------

    def forward_batch(self, P1, P2):
        """Scores for a batch of pairs; higher means more likely to match."""
        P1, P2 = self._as_batch(P1), self._as_batch(P2)
        if P1.shape != P2.shape:
            raise ShapeError(f"pair batches differ in shape: {P1.shape} vs {P2.shape}")
        N = P1.shape[0]
        k = self.kind
        n = self.nets
        if k in (ModelKind.TWO_CH, ModelKind.TWO_CH_DEEP):
            out = n["net"].forward(np.stack([P1, P2], axis=1))
            self._cache = ("2ch",)
            return out[:, 0]
        if k is ModelKind.TWO_CH_2STREAM:
            c1, s1 = split_streams_batch(P1)
            c2, s2 = split_streams_batch(P2)
            fc = n["central"].forward(np.stack([c1, c2], axis=1))
            fs = n["surround"].forward(np.stack([s1, s2], axis=1))
            self._cache = ("2ch-2stream", fc.shape, fs.shape)
            out = n["top"].forward(np.concatenate([_flat(fc), _flat(fs)], axis=1))
            return out[:, 0]
        if k in (ModelKind.SIAM, ModelKind.SIAM_SPP):
            f = n["branch"].forward(np.concatenate([P1, P2])[:, None])
            self._cache = ("siam", f.shape)
            f = _flat(f)
            out = n["top"].forward(np.concatenate([f[:N], f[N:]], axis=1))
            return out[:, 0]
        if k is ModelKind.PSEUDO_SIAM:
            f1 = n["branch0"].forward(P1[:, None])
            f2 = n["branch1"].forward(P2[:, None])
            self._cache = ("pseudo", f1.shape, f2.shape)
            out = n["top"].forward(np.concatenate([_flat(f1), _flat(f2)], axis=1))
            return out[:, 0]
        if k is ModelKind.SIAM_2STREAM:
            c1, s1 = split_streams_batch(P1)
            c2, s2 = split_streams_batch(P2)
            fc = n["central"].forward(np.concatenate([c1, c2])[:, None])
            fs = n["surround"].forward(np.concatenate([s1, s2])[:, None])
            self._cache = ("siam-2stream", fc.shape, fs.shape)
            fc, fs = _flat(fc), _flat(fs)
            top_in = np.concatenate([fc[:N], fs[:N], fc[N:], fs[N:]], axis=1)
            return n["top"].forward(top_in)[:, 0]
        raise ModeError(f"unsupported kind {k}")

    def backward(self, grad_scores):
        """Backpropagate d(loss)/d(score); accumulates into every layer's ``grads``."""
        if self._cache is None:
            raise CacheError("model backward called before forward_batch")
        g = np.asarray(grad_scores, dtype=self.dtype).reshape(-1, 1)
        n = self.nets
        tag = self._cache[0]
        if tag == "2ch":
            n["net"].backward(g)
            return
        gtop = n["top"].backward(g)
        if tag == "2ch-2stream":
            _, sc, ss = self._cache
            lc = int(np.prod(sc[1:]))
            n["central"].backward(gtop[:, :lc].reshape(sc))
            n["surround"].backward(gtop[:, lc:].reshape(ss))
        elif tag == "siam":
            _, sf = self._cache
            L = int(np.prod(sf[1:]))
            gf = np.concatenate([gtop[:, :L], gtop[:, L:]])
            n["branch"].backward(gf.reshape(sf))
        elif tag == "pseudo":
            _, s1, s2 = self._cache
            L = int(np.prod(s1[1:]))
            n["branch0"].backward(gtop[:, :L].reshape(s1))
            n["branch1"].backward(gtop[:, L:].reshape(s2))
        elif tag == "siam-2stream":
            _, sc, ss = self._cache
            lc, ls = int(np.prod(sc[1:])), int(np.prod(ss[1:]))
            a, b = lc + ls, 2 * lc + ls
            gc = np.concatenate([gtop[:, :lc], gtop[:, a:b]])
            gs = np.concatenate([gtop[:, lc:a], gtop[:, b:]])
            n["central"].backward(gc.reshape(sc))
            n["surround"].backward(gs.reshape(ss))

    def forward_pair(self, p1, p2) -> float:
        """Decision-layer score of one pair."""
        if self.mode is not MatchingMode.DECISION:
            raise ModeError("forward_pair needs decision-layer mode; use extract_descriptor/match_descriptors")
        p1, p2 = np.asarray(p1), np.asarray(p2)
        if self.kind is ModelKind.SIAM_SPP and p1.shape[-1] != p2.shape[-1]:
            d1 = self.describe_batch(p1, normalize=False)
            d2 = self.describe_batch(p2, normalize=False)
            return float(self.score_descriptors(d1, d2)[0])
        return float(self.forward_batch(p1, p2)[0])

    def score_descriptors(self, D1, D2):
        """Top-network scores for paired descriptor rows (siamese kinds only)."""
        if self.kind.is_two_channel:
            raise ModeError(f"{self.kind.value} has no separate top network over descriptors")
        D1 = np.asarray(D1, dtype=self.dtype)
        D2 = np.asarray(D2, dtype=self.dtype)
        out = self.nets["top"].forward(np.concatenate([D1, D2], axis=1))[:, 0]
        self.nets["top"].clear_cache()
        return out

    # -- descriptors ---------------------------------------------------------

    def descriptor_length(self) -> int:
        if self.kind.is_two_channel:
            raise ModeError(f"{self.kind.value} does not produce descriptors")
        if self.kind is ModelKind.SIAM_2STREAM:
            return int(np.prod(self.nets["central"].output_shape)) + \
                int(np.prod(self.nets["surround"].output_shape))
        return int(np.prod(self.branches[0].output_shape))

    def describe_batch(self, P, branch=0, normalize=None):
        """Descriptors for ``N x S x S`` patches, ``N x L``.

        ``branch`` selects the pseudo-siamese branch (0 or 1). Normalisation
        defaults to on in l2 mode.
        """
        if self.kind.is_two_channel:
            raise ModeError(f"{self.kind.value} does not produce descriptors")
        P = self._as_batch(P)
        n = self.nets
        if self.kind is ModelKind.SIAM_2STREAM:
            c, s = split_streams_batch(P)
            fc = _flat(n["central"].forward(c[:, None]))
            fs = _flat(n["surround"].forward(s[:, None]))
            D = np.concatenate([fc, fs], axis=1)
            n["central"].clear_cache()
            n["surround"].clear_cache()
        else:
            net = n["branch"] if "branch" in n else n[f"branch{branch}"]
            D = _flat(net.forward(P[:, None]))
            net.clear_cache()
        if normalize is None:
            normalize = self.mode is MatchingMode.L2
        if normalize:
            D = l2_normalize(D, axis=1)
        return D

    def extract_descriptor(self, p, branch=0) -> Descriptor:
        normalize = self.mode is MatchingMode.L2
        D = self.describe_batch(p, branch=branch, normalize=normalize)
        return Descriptor(D[0], normalized=normalize)


def match_descriptors(d1, d2) -> float:
    """Euclidean distance between two descriptors (lower is more similar)."""
    v1 = d1.values if isinstance(d1, Descriptor) else np.asarray(d1)
    v2 = d2.values if isinstance(d2, Descriptor) else np.asarray(d2)
    if v1.shape != v2.shape:
        raise ShapeError(f"descriptor lengths differ: {v1.shape} vs {v2.shape}")
    return float(np.linalg.norm(v1.astype(np.float64) - v2.astype(np.float64)))


def _resolve_archs(kind, archs, first_filters_2stream):
    merged = dict(DEFAULT_ARCHS[kind])
    if archs:
        merged.update(archs)
    if first_filters_2stream is not None and kind is ModelKind.TWO_CH_2STREAM:
        spec = A.parse_arch(merged["branch"])
        first = spec.layers[0]
        if not isinstance(first, A.Conv):
            raise A.ArchError("2ch-2stream branch must start with a convolution")
        layers = (A.Conv(first_filters_2stream, first.k, first.s),) + spec.layers[1:]
        merged["branch"] = A.render_arch(A.ArchSpec(layers))
    return merged


def build_model(kind, seed=0, mode=MatchingMode.DECISION, patch_size=64, archs=None,
                dtype=np.float32, first_filters_2stream=None) -> PatchModel:
    """Construct a network with seed-controlled uniform(+-1/sqrt(fan_in)) weights.

    :param kind: a :class:`ModelKind` or its string value.
    :param archs: optional overrides for the role strings (``net``, ``branch``, ``top``).
    :param first_filters_2stream: filter count of the first 2ch-2stream conv
        (the default architecture uses 95).
    """
    kind = ModelKind(kind)
    archs = _resolve_archs(kind, archs, first_filters_2stream)
    rng = np.random.default_rng(seed)
    S = patch_size

    def chain(role, in_shape):
        return Sequential(archs[role], in_shape, rng=rng, dtype=dtype)

    def out_len(net):
        return int(np.prod(net.output_shape))

    nets = {}
    if kind in (ModelKind.TWO_CH, ModelKind.TWO_CH_DEEP):
        nets["net"] = chain("net", (2, S, S))
    elif kind is ModelKind.TWO_CH_2STREAM:
        nets["central"] = chain("branch", (2, S // 2, S // 2))
        nets["surround"] = chain("branch", (2, S // 2, S // 2))
        nets["top"] = chain("top", (out_len(nets["central"]) + out_len(nets["surround"]),))
    elif kind in (ModelKind.SIAM, ModelKind.SIAM_SPP):
        nets["branch"] = chain("branch", (1, S, S))
        nets["top"] = chain("top", (2 * out_len(nets["branch"]),))
    elif kind is ModelKind.PSEUDO_SIAM:
        nets["branch0"] = chain("branch", (1, S, S))
        nets["branch1"] = chain("branch", (1, S, S))
        nets["top"] = chain("top", (2 * out_len(nets["branch0"]),))
    elif kind is ModelKind.SIAM_2STREAM:
        nets["central"] = chain("branch", (1, S // 2, S // 2))
        nets["surround"] = chain("branch", (1, S // 2, S // 2))
        nets["top"] = chain("top", (2 * (out_len(nets["central"]) + out_len(nets["surround"])),))
    return PatchModel(kind, nets, patch_size=S, mode=mode, seed=seed, archs=archs, dtype=dtype)


def build_reduced_model(kind, seed=0, mode=MatchingMode.DECISION, dtype=np.float64) -> PatchModel:
    """Small variant of ``kind`` on 16x16 patches with at most 8 filters per layer."""
    kind = ModelKind(kind)
    return build_model(kind, seed=seed, mode=mode, patch_size=REDUCED_PATCH_SIZE,
                       archs=REDUCED_ARCHS[kind], dtype=dtype)
