"""Local-patches benchmark I/O: patch containers, info files and match files.

On-disk layout of one dataset directory::

    patches0000.bmp, patches0001.bmp, ...   grayscale containers, 16x16 cells of 64x64
    info.txt                                one "point_id unused" line per patch
    m50_<n>_<n>_0.txt                       match files, 6 integers per line
"""
from __future__ import annotations

import glob
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .training import LabeledPair, augment

PATCH = 64
GRID = 16
CONTAINER_SIDE = PATCH * GRID
CONTAINER_GLOB = "patches*.bmp"
INFO_FILE = "info.txt"


class DatasetError(Exception):
    """Base class for benchmark input errors."""


class FormatError(DatasetError):
    pass


class PatchCountError(DatasetError):
    pass


class PointIdMismatchError(DatasetError):
    pass


@dataclass
class PatchStore:
    name: str
    patches: np.ndarray  # N x 64 x 64 float32 in [0, 1]
    point_ids: np.ndarray  # N int64

    def __post_init__(self):
        if len(self.patches) != len(self.point_ids):
            raise PatchCountError(
                f"{self.name}: {len(self.patches)} patches but {len(self.point_ids)} point ids")

    def __len__(self):
        return len(self.patches)


@dataclass
class PairList:
    index1: np.ndarray
    index2: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __len__(self):
        return len(self.labels)

    def entries(self):
        return list(zip(self.index1.tolist(), self.index2.tolist(), self.labels.tolist()))


def _to_gray(img: Image.Image) -> np.ndarray:
    if img.mode in ("L", "P", "1"):
        return np.asarray(img.convert("L"), dtype=np.uint8)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def container_files(directory):
    files = sorted(glob.glob(os.path.join(directory, CONTAINER_GLOB)),
                   key=lambda p: int(re.sub(r"\D", "", os.path.basename(p)) or 0))
    return files


def read_info(path):
    ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids.append(int(parts[0]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed info line {line.strip()!r}") from None
    return np.array(ids, dtype=np.int64)


def decode_container(path) -> np.ndarray:
    """All cells of one container as ``k x 64 x 64`` uint8, row-major."""
    try:
        with Image.open(path) as img:
            a = _to_gray(img)
    except OSError as exc:
        raise FormatError(f"{path}: short read or undecodable container ({exc})") from exc
    H, W = a.shape
    if H % PATCH or W % PATCH:
        raise FormatError(f"{path}: container size {W}x{H} is not a multiple of {PATCH}")
    rows, cols = H // PATCH, W // PATCH
    return a.reshape(rows, PATCH, cols, PATCH).transpose(0, 2, 1, 3).reshape(-1, PATCH, PATCH)


def load_patch_store(directory, name=None) -> PatchStore:
    """Load a benchmark directory; trailing blank cells beyond the info count are dropped."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    info_path = os.path.join(directory, INFO_FILE)
    if not os.path.exists(info_path):
        raise FileNotFoundError(f"missing info file: {info_path}")
    point_ids = read_info(info_path)
    name = name or os.path.basename(os.path.normpath(directory))
    n = len(point_ids)
    files = container_files(directory)
    cells, have = [], 0
    for path in files:
        if have >= n:
            break
        block = decode_container(path)
        cells.append(block)
        have += len(block)
    if have < n:
        raise PatchCountError(
            f"{directory}: info file lists {n} patches but containers hold only {have}")
    raw = np.concatenate(cells)[:n] if cells else np.zeros((0, PATCH, PATCH), np.uint8)
    patches = raw.astype(np.float32) / np.float32(255.0)
    return PatchStore(name, patches, point_ids)


def write_patch_store(store: PatchStore, directory):
    """Write ``store`` in the container format (values quantised to 8 bits)."""
    os.makedirs(directory, exist_ok=True)
    q = np.clip(np.rint(np.asarray(store.patches, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    per = GRID * GRID
    n_files = (len(q) + per - 1) // per
    for f in range(n_files):
        chunk = q[f * per:(f + 1) * per]
        full = np.zeros((per, PATCH, PATCH), np.uint8)
        full[:len(chunk)] = chunk
        img = full.reshape(GRID, GRID, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(CONTAINER_SIDE, CONTAINER_SIDE)
        Image.fromarray(img, mode="L").save(os.path.join(directory, f"patches{f:04d}.bmp"))
    with open(os.path.join(directory, INFO_FILE), "w") as fh:
        for pid in store.point_ids:
            fh.write(f"{int(pid)} 0\n")


def load_pair_list(path, store: PatchStore) -> PairList:
    """Read a 6-column match file; labels are +1 iff the two point ids agree."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing match file: {path}")
    i1, i2, lab = [], [], []
    n = len(store)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            try:
                a, pa, _, b, pb, _ = (int(v) for v in parts)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
            for idx in (a, b):
                if not 0 <= idx < n:
                    raise IndexError(f"{path}:{lineno}: patch index {idx} out of range for {n} patches")
            if store.point_ids[a] != pa or store.point_ids[b] != pb:
                raise PointIdMismatchError(
                    f"{path}:{lineno}: point ids ({pa}, {pb}) disagree with store "
                    f"({store.point_ids[a]}, {store.point_ids[b]})")
            i1.append(a)
            i2.append(b)
            lab.append(1 if pa == pb else -1)
    return PairList(np.array(i1, dtype=np.int64), np.array(i2, dtype=np.int64),
                    np.array(lab, dtype=np.int64), os.path.basename(path))


def write_pair_list(path, store: PatchStore, pairs):
    """Write ``(index1, index2)`` pairs as a 6-column match file."""
    with open(path, "w") as fh:
        for a, b in pairs:
            fh.write(f"{a} {int(store.point_ids[a])} 0 {b} {int(store.point_ids[b])} 0\n")


@dataclass(frozen=True)
class Normalization:
    """Global standardisation statistics and the store they were fitted on."""

    mean: float
    std: float
    source: str = ""

    def apply(self, x):
        x = np.asarray(x)
        dtype = x.dtype if x.dtype.kind == "f" else np.float32
        return ((x - self.mean) / self.std).astype(dtype, copy=False)


STD_FLOOR = 1e-6


def fit_normalization(store: PatchStore) -> Normalization:
    p = np.asarray(store.patches, dtype=np.float64)
    mean = float(p.mean()) if p.size else 0.0
    std = float(p.std()) if p.size else 1.0
    return Normalization(mean, max(std, STD_FLOOR), store.name)


def preprocess(patch, norm: Normalization, size=PATCH):
    """``(x - mean) / std`` with store-level statistics; returns ``1 x S x S``."""
    patch = np.asarray(patch)
    if patch.ndim == 3 and patch.shape[0] == 1:
        patch = patch[0]
    if patch.shape != (size, size):
        raise ValueError(f"preprocess: expected a {size}x{size} patch, got {patch.shape}")
    return norm.apply(patch)[None]


def sample_batch(store: PatchStore, pairs: PairList, batch_size, rng, norm: Normalization):
    """Uniform sampling with replacement, each sample with a random dihedral transform."""
    if len(pairs) == 0:
        raise ValueError("cannot sample from an empty pair list")
    idx = rng.integers(0, len(pairs), size=batch_size)
    tids = rng.integers(0, 8, size=batch_size)
    out = []
    for i, t in zip(idx, tids):
        p1 = norm.apply(store.patches[pairs.index1[i]])
        p2 = norm.apply(store.patches[pairs.index2[i]])
        out.append(augment(LabeledPair(p1, p2, int(pairs.labels[i])), int(t)))
    return out


def store_sampler(store: PatchStore, pairs: PairList, norm: Normalization):
    def sample(batch_size, rng):
        return sample_batch(store, pairs, batch_size, rng, norm)
    return sample


def synthetic_store(name, n_points, per_point=2, seed=0, noise=0.0, size=PATCH):
    """Random patch store where patches of one point are (noisy) copies.

    Intended for fixtures and demos; values stay in [0, 1] on the 8-bit grid.
    """
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(n_points, size, size)).astype(np.float64)
    patches, ids = [], []
    for pid in range(n_points):
        for _ in range(per_point):
            p = base[pid] + noise * 255.0 * rng.standard_normal((size, size))
            patches.append(np.clip(np.rint(p), 0, 255))
            ids.append(pid)
    patches = (np.array(patches) / 255.0).astype(np.float32)
    return PatchStore(name, patches, np.array(ids, dtype=np.int64))


def balanced_pairs(store: PatchStore, n_pairs, seed=0):
    """Equal numbers of positive and negative index pairs drawn from ``store``."""
    rng = np.random.default_rng(seed)
    by_point = {}
    for i, pid in enumerate(store.point_ids.tolist()):
        by_point.setdefault(pid, []).append(i)
    multi = [v for v in by_point.values() if len(v) >= 2]
    if not multi:
        raise DatasetError("no point has two patches; cannot draw positives")
    out = []
    for k in range(n_pairs):
        if k % 2 == 0:
            group = multi[rng.integers(len(multi))]
            a, b = rng.choice(group, size=2, replace=False)
        else:
            while True:
                a, b = rng.integers(0, len(store), size=2)
                if store.point_ids[a] != store.point_ids[b]:
                    break
        out.append((int(a), int(b)))
    return out
