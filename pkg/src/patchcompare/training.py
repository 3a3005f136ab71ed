"""Hinge-loss training with momentum SGD and dihedral data augmentation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in {name}")
        self.layer = name


@dataclass
class TrainConfig:
    """Optimiser settings. Defaults follow the published setup (lr 1.0 at batch 128).

    The loss is summed over the batch, so small models trained on a few dozen
    pairs usually need much smaller rates (around 1e-3) to avoid diverging.
    """

    iterations: int
    learning_rate: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128
    seed: int = 0
    averaging_start: Optional[int] = None
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def as_dict(self):
        return asdict(self)


@dataclass
class LabeledPair:
    p1: np.ndarray
    p2: np.ndarray
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label!r}")


def hinge_objective(outputs, labels, weights=(), lam=0.0):
    """Summed hinge loss plus ``lam/2 * ||w||^2``.

    :param outputs: network outputs ``o_i``.
    :param labels: ``y_i`` in {-1, +1}.
    :param weights: iterable of weight arrays entering the regulariser.
    :return: ``(loss, dloss/do)``; the subgradient at the hinge is taken as
        the active branch (``1 - y*o > 0``).
    """
    o = np.asarray(outputs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if o.shape != y.shape:
        raise ValueError(f"outputs and labels differ in length: {o.shape[0]} vs {y.shape[0]}")
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be -1 or +1")
    margin = 1.0 - y * o
    active = margin > 0
    loss = float(np.sum(margin[active]))
    if lam:
        loss += 0.5 * lam * sum(float(np.sum(np.asarray(w, dtype=np.float64) ** 2)) for w in weights)
    grad = np.where(active, -y, 0).astype(np.float64)
    return loss, grad


# Dihedral group of the square, as (quarter turns, mirror first).
# 0 identity, 1-3 rotations by 90/180/270, 4 horizontal flip, 5 vertical flip,
# 6 transpose, 7 anti-transpose.
_DIHEDRAL = [(0, False), (1, False), (2, False), (3, False),
             (0, True), (2, True), (1, True), (3, True)]


def apply_transform(patch, transform_id):
    if not 0 <= int(transform_id) < 8:
        raise ValueError(f"transform id must be in 0..7, got {transform_id}")
    turns, mirror = _DIHEDRAL[int(transform_id)]
    x = np.asarray(patch)
    if mirror:
        x = x[..., :, ::-1]
    return np.ascontiguousarray(np.rot90(x, turns, axes=(-2, -1)))


def augment(pair: LabeledPair, transform_id: int) -> LabeledPair:
    """Apply the same dihedral transform to both patches; the label is kept."""
    return LabeledPair(apply_transform(pair.p1, transform_id),
                       apply_transform(pair.p2, transform_id), pair.label)


def compose_transforms(a: int, b: int) -> int:
    """Id of the transform equal to applying ``b`` then ``a``."""
    probe = np.arange(9).reshape(3, 3)
    target = apply_transform(apply_transform(probe, b), a)
    for c in range(8):
        if np.array_equal(apply_transform(probe, c), target):
            return c
    raise AssertionError("dihedral group is not closed")


def _is_weight(name):
    return name.endswith("weight")


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    average: dict = field(default_factory=dict)
    iteration: int = 0
    averaged_steps: int = 0


def batch_arrays(batch):
    P1 = np.stack([p.p1 for p in batch])
    P2 = np.stack([p.p2 for p in batch])
    y = np.array([p.label for p in batch])
    return P1, P2, y


def sgd_step(model, batch, cfg: TrainConfig, state: Optional[OptimizerState] = None):
    """One momentum-SGD update on the summed batch hinge loss.

    ``v <- momentum*v - lr*(dL/dw + lambda*w)``, ``w <- w + v``; biases skip
    weight decay. Parameters are updated in place so shared branches keep
    aliasing the same arrays.

    :return: ``(loss, state)``
    """
    if not batch:
        raise ValueError("sgd_step needs a non-empty batch")
    state = state if state is not None else OptimizerState()
    P1, P2, y = batch_arrays(batch)
    model.zero_grad()
    out = model.forward_batch(P1, P2)
    weights = [layer.params[k] for name, layer, k in model.parameters() if _is_weight(name)]
    loss, dout = hinge_objective(out, y, weights, cfg.weight_decay)
    model.backward(dout)
    updates = []
    for name, layer, key in model.parameters():
        g = layer.grads[key]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        w = layer.params[key]
        if _is_weight(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * w
        v = state.velocity.get(name)
        v = -cfg.learning_rate * g if v is None else cfg.momentum * v - cfg.learning_rate * g
        updates.append((name, w, v.astype(w.dtype, copy=False)))
    for name, w, v in updates:
        state.velocity[name] = v
        w += v
    state.iteration += 1
    if cfg.averaging_start is not None and state.iteration > cfg.averaging_start:
        state.averaged_steps += 1
        t = state.averaged_steps
        for name, layer, key in model.parameters():
            w = layer.params[key]
            avg = state.average.get(name)
            state.average[name] = w.copy() if avg is None else avg + (w - avg) / t
    return loss, state


def apply_average(model, state: OptimizerState):
    """Overwrite the model parameters with the running average, if any."""
    if state.average:
        model.load_state_dict(state.average)


@dataclass
class TrainResult:
    model: object
    state: OptimizerState
    losses: list
    iterations: int
    seconds: float


def train(model, sampler: Callable, cfg: TrainConfig, telemetry=None, callback=None) -> TrainResult:
    """Run ``cfg.iterations`` minibatch steps.

    :param sampler: ``sampler(batch_size, rng) -> list[LabeledPair]``; it is
        responsible for augmentation (see :func:`patchcompare.dataset.sample_batch`).
    :param telemetry: optional path of an append-only CSV with columns
        ``iteration,loss,wall_time``.
    :param callback: called as ``callback(iteration, loss, model)``; returning
        True stops training early.
    """
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    losses = []
    start = time.perf_counter()
    writer = fh = None
    if telemetry is not None:
        fh = open(telemetry, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(["iteration", "loss", "wall_time"])
    try:
        for it in range(1, cfg.iterations + 1):
            batch = sampler(cfg.batch_size, rng)
            loss, state = sgd_step(model, batch, cfg, state)
            losses.append(loss)
            if writer is not None and (it % cfg.log_every == 0 or it == cfg.iterations):
                writer.writerow([it, f"{loss:.9g}", f"{time.perf_counter() - start:.3f}"])
            if it % cfg.log_every == 0:
                logger.info("iteration %d loss %.6f", it, loss)
            if callback is not None and callback(it, loss, model):
                break
    finally:
        if fh is not None:
            fh.close()
    apply_average(model, state)
    for net in model.nets.values():
        net.clear_cache()
    return TrainResult(model, state, losses, state.iteration, time.perf_counter() - start)


def pair_sampler(pairs):
    """Sampler over an in-memory list of pairs with random augmentation."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty pair list")

    def sample(batch_size, rng):
        idx = rng.integers(0, len(pairs), size=batch_size)
        tids = rng.integers(0, 8, size=batch_size)
        return [augment(pairs[i], t) for i, t in zip(idx, tids)]

    return sample


def sign_accuracy(model, pairs) -> float:
    P1, P2, y = batch_arrays(pairs)
    out = model.forward_batch(P1, P2)
    return float(np.mean(np.sign(out) == y))
