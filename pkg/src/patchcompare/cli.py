"""Command-line entry point: ``patchcompare {train,eval,stereo,describe,match}``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines, ``#``
comments) and repeated ``--set key=value`` overrides. Explicit flags override
the file and ``--set`` overrides both.

Exit codes: 0 ok, 2 configuration, 3 input/output, 4 numeric failure,
5 degenerate data, 6 capability mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import struct
import sys

import numpy as np
from PIL import Image

from .arch import ArchError
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .dataset import (DatasetError, PairList, balanced_pairs, fit_normalization, load_pair_list,
                      load_patch_store, store_sampler)
from .evaluation import (DATASETS, DegenerateLabelsError, Polarity, ProtocolError, ScoredPairs,
                         SHORT_NAMES, extract_keypoint_patch, homography_match_eval, read_homography,
                         read_keypoints, run_protocol, write_roc_csv)
from .layers import ShapeError
from .models import MatchingMode, ModeError, ModelKind, build_model
from .stereo import (DEFAULT_THRESHOLDS, DisparityMap, MRFParams, RectifiedPair, cost_volume,
                     edge_weights, error_stats, mrf_energy, optimize_mrf, read_disparity_bin,
                     read_disparity_pgm, wta, write_disparity_bin, write_disparity_pgm)
from .training import TrainConfig, train

logger = logging.getLogger("patchcompare")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_DEGENERATE = 5
EXIT_CAPABILITY = 6

ORACLE_CHECKPOINT = "oracle"


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

def _parse_line(text, where):
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    return key.strip(), value.strip()


def read_config(path) -> dict:
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = _parse_line(line, f"{path}:{lineno}")
                cfg[k] = v
    return cfg


def resolve_config(args, flag_keys) -> dict:
    cfg = read_config(args.config) if args.config else {}
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is None:
            continue
        if isinstance(value, list):
            for item in value:
                name, v = _parse_line(item, f"--{key.replace('_', '-')}")
                cfg[f"{key}.{_dataset_name(name)}"] = v
        else:
            cfg[key] = str(value)
    for item in args.set or []:
        k, v = _parse_line(item, "--set")
        cfg[k] = v
    return cfg


def _require(cfg, key):
    if key not in cfg or cfg[key] == "":
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _typed(cfg, key, cast, default=None):
    if key not in cfg or cfg[key] == "":
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise ConfigError(f"setting {key}={cfg[key]!r} is not a valid {cast.__name__}") from None


def _enum(cls, value, key):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ConfigError(f"{key}={value!r}; expected one of {allowed}") from None


_ALIASES = {"yos": "yosemite", "nd": "notredame", "lib": "liberty"}


def _dataset_name(name):
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")
    return key


# -- image helpers ---------------------------------------------------------------

def load_gray(path) -> np.ndarray:
    """Grayscale image scaled to [0, 1] as float32."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as img:
        a = np.asarray(img.convert("L"), dtype=np.float32)
    return a / np.float32(255.0)


def _patches_from_source(path, size, count=None):
    """Patches from a benchmark directory or from a grid image of ``size`` cells."""
    if os.path.isdir(path):
        P = load_patch_store(path).patches
        if P.shape[1] != size:
            raise ShapeError(f"dataset patches are {P.shape[1]}px but the model expects {size}px")
    else:
        img = load_gray(path)
        H, W = img.shape
        if H % size or W % size:
            raise ShapeError(f"{path}: {W}x{H} is not a grid of {size}x{size} cells")
        P = img.reshape(H // size, size, W // size, size).transpose(0, 2, 1, 3).reshape(-1, size, size)
    if count is not None:
        if count > len(P):
            raise ShapeError(f"{path} holds {len(P)} patches, fewer than count={count}")
        P = P[:count]
    return P


def _keypoint_patches(image_path, keypoint_path, size):
    img = load_gray(image_path)
    kp = read_keypoints(keypoint_path)
    if len(kp) == 0:
        raise ShapeError(f"{keypoint_path}: no keypoints")
    P = np.stack([extract_keypoint_patch(img, x, y, s, size=size) for x, y, s in kp])
    return kp, P


def _normalized(model, P):
    return model.normalization.apply(P) if model.normalization is not None else P


# -- train ------------------------------------------------------------------------

def cmd_train(cfg) -> int:
    kind = _enum(ModelKind, cfg.get("kind", "2ch"), "kind")
    mode = _enum(MatchingMode, cfg.get("mode", "decision"), "mode")
    if kind.is_two_channel and mode is MatchingMode.L2:
        raise ModeError(f"{kind.value} cannot be trained in l2 mode")
    out = _require(cfg, "checkpoint")
    iterations = _typed(cfg, "iterations", int)
    if iterations is None:
        raise ConfigError("missing required setting 'iterations'")
    try:
        tc = TrainConfig(
            iterations=iterations,
            learning_rate=_typed(cfg, "learning_rate", float, 1.0),
            momentum=_typed(cfg, "momentum", float, 0.9),
            weight_decay=_typed(cfg, "weight_decay", float, 0.0005),
            batch_size=_typed(cfg, "batch_size", int, 128),
            seed=_typed(cfg, "seed", int, 0),
            averaging_start=_typed(cfg, "averaging_start", int),
            log_every=_typed(cfg, "log_every", int, 100),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    archs = {k[5:]: v for k, v in cfg.items() if k.startswith("arch.")}
    model = build_model(kind, seed=tc.seed, mode=mode, archs=archs or None,
                        first_filters_2stream=_typed(cfg, "first_filters_2stream", int))
    store = load_patch_store(_require(cfg, "dataset"), name=cfg.get("dataset_name") or None)
    if cfg.get("pairs"):
        pairs = load_pair_list(cfg["pairs"], store)
    else:
        n_pairs = _typed(cfg, "pair_count", int, 2 * len(store))
        idx = balanced_pairs(store, n_pairs, seed=tc.seed)
        a = np.array([i for i, _ in idx], dtype=np.int64)
        b = np.array([j for _, j in idx], dtype=np.int64)
        pairs = PairList(a, b, np.where(store.point_ids[a] == store.point_ids[b], 1, -1), "balanced")
    norm = fit_normalization(store)
    model.normalization = norm
    result = train(model, store_sampler(store, pairs, norm), tc, telemetry=cfg.get("telemetry") or None)
    save_checkpoint(out, model, meta={"iterations": result.iterations, "config": tc.as_dict(),
                                      "dataset": store.name, "pairs": pairs.provenance})
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {kind.value} for {result.iterations} iterations; final loss {final:.6g}; wrote {out}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def _oracle(store, pairs):
    """Scores pairs by point-id agreement; a stand-in for a perfect model."""
    same = store.point_ids[pairs.index1] == store.point_ids[pairs.index2]
    return ScoredPairs(same.astype(np.float64), pairs.labels, Polarity.HIGHER_IS_SIMILAR)


def cmd_eval(cfg) -> int:
    models, stores, pairfiles = {}, {}, {}
    for name in DATASETS:
        ck = _require(cfg, f"checkpoint.{name}")
        models[name] = _oracle if ck == ORACLE_CHECKPOINT else load_model(ck)
        stores[name] = load_patch_store(_require(cfg, f"dataset.{name}"), name=name)
        pairfiles[name] = load_pair_list(_require(cfg, f"pairs.{name}"), stores[name])
    recall = _typed(cfg, "recall", float, 0.95)
    report = run_protocol(models, stores, pairfiles, recall=recall)
    out = _require(cfg, "report")
    report.to_csv(out)
    roc_dir = cfg.get("roc_dir")
    if roc_dir:
        os.makedirs(roc_dir, exist_ok=True)
        for (a, b), (fpr, tpr) in report.rocs.items():
            write_roc_csv(os.path.join(roc_dir, f"roc_{SHORT_NAMES[a]}_{SHORT_NAMES[b]}.csv"), fpr, tpr)
    for a, b, v in report.rows():
        print(f"{a:>10} {b:>4} {100 * v:8.3f}")
    return EXIT_OK


# -- stereo --------------------------------------------------------------------

def _read_disparity(path):
    if path.endswith(".pgm"):
        return read_disparity_pgm(path)
    if path.endswith(".bin"):
        return read_disparity_bin(path)[0]
    with Image.open(path) as img:
        v = np.asarray(img.convert("L"), dtype=np.int64)
    return DisparityMap(v, v > 0)


def cmd_stereo(cfg) -> int:
    d_max = _typed(cfg, "dmax", int)
    if d_max is None:
        raise ConfigError("missing required setting 'dmax'")
    if d_max < 1:
        raise ConfigError(f"dmax must be >= 1, got {d_max}")
    cost = _enum(MatchingMode, cfg.get("cost", "decision"), "cost")
    thresholds = DEFAULT_THRESHOLDS
    if cfg.get("thresholds"):
        try:
            thresholds = tuple(float(t) for t in cfg["thresholds"].split(","))
        except ValueError:
            raise ConfigError(f"thresholds={cfg['thresholds']!r} is not a comma-separated list") from None
    try:
        params = MRFParams(_typed(cfg, "lambda1", float, 0.01), _typed(cfg, "lambda2", float, 0.2),
                           _typed(cfg, "sigma", float, 7.0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out_dir = _require(cfg, "out_dir")
    model = load_model(_require(cfg, "checkpoint"))
    if model.kind.is_two_channel and cost is MatchingMode.L2:
        raise ModeError(f"{model.kind.value} checkpoint cannot produce an l2 cost")
    left, right = load_gray(_require(cfg, "left")), load_gray(_require(cfg, "right"))
    try:
        pair = RectifiedPair(left, right, d_max)
    except ValueError as exc:
        if isinstance(exc, ShapeError):
            raise
        raise ConfigError(str(exc)) from None
    cv = cost_volume(model, pair, cost)
    ew = edge_weights(left.astype(np.float64) * 255.0, params)
    d_wta = wta(cv)
    d_mrf = optimize_mrf(cv, ew)
    os.makedirs(out_dir, exist_ok=True)
    maps = {"wta": d_wta, "mrf": d_mrf}
    for name, dmap in maps.items():
        write_disparity_pgm(os.path.join(out_dir, f"{name}.pgm"), dmap, d_max)
        write_disparity_bin(os.path.join(out_dir, f"{name}.bin"), dmap, d_max)
    print(f"energy wta {mrf_energy(d_wta, cv, ew):.6g} mrf {mrf_energy(d_mrf, cv, ew):.6g}")
    if cfg.get("gt"):
        gt = _read_disparity(cfg["gt"])
        occ = None
        if cfg.get("occlusion"):
            occ = load_gray(cfg["occlusion"]) > 0
        with open(os.path.join(out_dir, "stats.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["map", "threshold", "fraction_all", "fraction_unoccluded"])
            for name, dmap in maps.items():
                for t, f_all, f_un in error_stats(dmap, gt, occ, thresholds):
                    w.writerow([name, f"{t:g}", f"{f_all:.10g}", f"{f_un:.10g}"])
                    print(f"{name} <= {t:g}px: all {f_all:.4f} unoccluded {f_un:.4f}")
    return EXIT_OK


# -- describe / match ----------------------------------------------------------------

DESCRIPTOR_HEADER = struct.Struct("<2I")


def write_descriptors(path, D):
    D = np.ascontiguousarray(D, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_HEADER.pack(*D.shape))
        fh.write(D.tobytes())


def read_descriptors(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(DESCRIPTOR_HEADER.size)
        if len(head) != DESCRIPTOR_HEADER.size:
            raise ValueError(f"{path}: truncated descriptor header")
        count, L = DESCRIPTOR_HEADER.unpack(head)
        v = np.frombuffer(fh.read(), dtype="<f4")
    if v.size != count * L:
        raise ValueError(f"{path}: expected {count * L} values, got {v.size}")
    return v.reshape(count, L)


def cmd_describe(cfg) -> int:
    model = load_model(_require(cfg, "checkpoint"))
    if model.kind.is_two_channel:
        raise ModeError(f"{model.kind.value} does not produce descriptors")
    branch = _typed(cfg, "branch", int, 0)
    if cfg.get("image") or cfg.get("keypoints"):
        _, P = _keypoint_patches(_require(cfg, "image"), _require(cfg, "keypoints"), model.patch_size)
    else:
        P = _patches_from_source(_require(cfg, "patches"), model.patch_size, _typed(cfg, "count", int))
    D = model.describe_batch(_normalized(model, P), branch=branch)
    out = _require(cfg, "out")
    write_descriptors(out, D)
    print(f"wrote {D.shape[0]} x {D.shape[1]} descriptors to {out}")
    return EXIT_OK


def similarity_matrix(model, P1, P2, chunk=512) -> np.ndarray:
    """``n1 x n2`` similarities (higher is more alike) between two patch sets."""
    P1, P2 = _normalized(model, P1), _normalized(model, P2)
    n1, n2 = len(P1), len(P2)
    S = np.empty((n1, n2))
    ii, jj = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    if model.kind.is_two_channel:
        for s in range(0, len(ii), chunk):
            S.flat[s:s + chunk] = model.forward_batch(P1[ii[s:s + chunk]], P2[jj[s:s + chunk]])
        for net in model.nets.values():
            net.clear_cache()
        return S
    if model.mode is MatchingMode.L2:
        D1, D2 = model.describe_batch(P1), model.describe_batch(P2)
        return -np.linalg.norm(D1[:, None, :].astype(np.float64) - D2[None, :, :], axis=2)
    right = 1 if model.kind is ModelKind.PSEUDO_SIAM else 0
    D1 = model.describe_batch(P1, normalize=False)
    D2 = model.describe_batch(P2, branch=right, normalize=False)
    for s in range(0, len(ii), chunk):
        S.flat[s:s + chunk] = model.score_descriptors(D1[ii[s:s + chunk]], D2[jj[s:s + chunk]])
    return S


def cmd_match(cfg) -> int:
    model = load_model(_require(cfg, "checkpoint"))
    kp1, P1 = _keypoint_patches(_require(cfg, "image1"), _require(cfg, "keypoints1"), model.patch_size)
    kp2, P2 = _keypoint_patches(_require(cfg, "image2"), _require(cfg, "keypoints2"), model.patch_size)
    S = similarity_matrix(model, P1, P2) + 0.0  # no negative zeros in the CSV
    out = _require(cfg, "out")
    order = np.argsort(-S.ravel(), kind="stable")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index1", "index2", "score"])
        for rank, flat in enumerate(order, 1):
            i, j = divmod(int(flat), S.shape[1])
            w.writerow([rank, i, j, f"{S[i, j]:.9g}"])
    if cfg.get("homography"):
        H = read_homography(cfg["homography"])
        tol = _typed(cfg, "pixel_tol", float, 2.5)
        sets = ([(tuple(k), None) for k in kp1], [(tuple(k), None) for k in kp2])
        _, mAP = homography_match_eval(sets, H, pixel_tol=tol, similarity=S)
        print(f"mAP {mAP:.6f}")
        if cfg.get("map_out"):
            with open(cfg["map_out"], "w") as fh:
                fh.write(f"{mAP:.10g}\n")
    print(f"wrote {S.size} ranked pair scores to {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------

TRAIN_HELP = """\
config keys: dataset, dataset_name, pairs, pair_count, kind, mode, iterations,
learning_rate, momentum, weight_decay, batch_size, seed, averaging_start,
log_every, first_filters_2stream, arch.<role>, checkpoint, telemetry.
telemetry CSV columns: iteration, loss, wall_time."""

EVAL_HELP = """\
config keys: checkpoint.<name>, dataset.<name>, pairs.<name> for each of
yosemite, notredame, liberty (aliases yos, nd, lib); report, roc_dir, recall.
A checkpoint value of 'oracle' scores pairs by point-id agreement.
report CSV columns: train, test, fpr95, fpr95_percent; rows in the order
Yos/ND, Yos/Lib, ND/Yos, ND/Lib, Lib/Yos, Lib/ND, mean, mean(1,4).
ROC CSV columns: fpr, tpr."""

STEREO_HELP = """\
config keys: checkpoint, left, right, dmax, cost (decision|l2), out_dir, gt,
occlusion, lambda1, lambda2, sigma, thresholds (comma separated).
outputs: wta.pgm, wta.bin, mrf.pgm, mrf.bin in out_dir; with gt also stats.csv
with columns map, threshold, fraction_all, fraction_unoccluded."""

DESCRIBE_HELP = """\
config keys: checkpoint, patches (dataset dir or grid image), count, or
image + keypoints (x y scale per line); branch; out.
output: uint32 count, uint32 length, then count*length float32 (little-endian)."""

MATCH_HELP = """\
config keys: checkpoint, image1, keypoints1, image2, keypoints2, homography,
pixel_tol, out, map_out.
output CSV columns: rank, index1, index2, score (higher is more similar)."""


def build_parser():
    parser = argparse.ArgumentParser(prog="patchcompare", description="Learned patch comparison toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, epilog, flags):
        p = sub.add_parser(name, help=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
        p.set_defaults(flag_keys=[kw.get("dest", f.lstrip("-").replace("-", "_")) for f, kw in flags])
        return p

    command("train", "train a model on a benchmark directory", TRAIN_HELP, [
        ("--dataset", {}), ("--kind", {}), ("--iterations", {}), ("--checkpoint", {}),
        ("--telemetry", {}), ("--seed", {})])
    command("eval", "six-way FPR95 benchmark", EVAL_HELP, [
        ("--checkpoint", {"action": "append", "metavar": "NAME=PATH"}),
        ("--dataset", {"action": "append", "metavar": "NAME=DIR"}),
        ("--pairs", {"action": "append", "metavar": "NAME=FILE"}),
        ("--report", {}), ("--roc-dir", {"dest": "roc_dir"})])
    command("stereo", "disparity maps from a rectified pair", STEREO_HELP, [
        ("--checkpoint", {}), ("--left", {}), ("--right", {}), ("--dmax", {}),
        ("--cost", {}), ("--out-dir", {"dest": "out_dir"}), ("--gt", {}), ("--occlusion", {})])
    command("describe", "write descriptors for patches", DESCRIBE_HELP, [
        ("--checkpoint", {}), ("--patches", {}), ("--count", {}), ("--image", {}),
        ("--keypoints", {}), ("--branch", {}), ("--out", {})])
    command("match", "score all keypoint pairs between two images", MATCH_HELP, [
        ("--checkpoint", {}), ("--image1", {}), ("--keypoints1", {}), ("--image2", {}),
        ("--keypoints2", {}), ("--homography", {}), ("--out", {}), ("--map-out", {"dest": "map_out"})])
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "stereo": cmd_stereo,
            "describe": cmd_describe, "match": cmd_match}


def _fail(code, exc):
    print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, args.flag_keys)
        return COMMANDS[args.command](cfg)
    except DegenerateLabelsError as exc:
        return _fail(EXIT_DEGENERATE, exc)
    except ModeError as exc:
        return _fail(EXIT_CAPABILITY, exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ConfigError, ArchError, ProtocolError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (OSError, DatasetError, CheckpointError, ShapeError, IndexError) as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
