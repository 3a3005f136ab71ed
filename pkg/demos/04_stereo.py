"""Disparity from a learned matching cost.

The scene is a random texture seen by two cameras, displaced by three pixels.
A small 2-channel network is overfit to windows of this scene. Its negated
scores form a cost volume. Winner-takes-all picks the cheapest disparity per
pixel, and the MRF step trades cost against smoothness along image edges.
"""
import numpy as np

from patchcompare.models import build_reduced_model
from patchcompare.stereo import (DisparityMap, RectifiedPair, cost_volume, edge_weights, error_stats,
                                 mrf_energy, optimize_mrf, wta)
from patchcompare.training import LabeledPair, TrainConfig, train

SHIFT, D_MAX, S = 3, 6, 16


def scene(seed=0):
    wide = np.random.default_rng(seed).random((32, 40 + SHIFT))
    left, right = wide[:, :40], wide[:, SHIFT:SHIFT + 40]
    return (left - 0.5) / 0.29, (right - 0.5) / 0.29


def scene_sampler(left, right):
    pos, neg = [], []
    for y in range(left.shape[0] - S + 1):
        for x in range(D_MAX, left.shape[1] - S + 1):
            for d in range(D_MAX + 1):
                pair = LabeledPair(left[y:y + S, x:x + S], right[y:y + S, x - d:x - d + S],
                                   1 if d == SHIFT else -1)
                (pos if d == SHIFT else neg).append(pair)

    def sample(batch_size, rng):
        return ([pos[i] for i in rng.integers(0, len(pos), batch_size // 2)]
                + [neg[i] for i in rng.integers(0, len(neg), batch_size - batch_size // 2)])

    return sample


def main():
    left, right = scene()
    model = build_reduced_model("2ch", seed=0)
    train(model, scene_sampler(left, right), TrainConfig(iterations=1500, learning_rate=0.0003, batch_size=32))

    pair = RectifiedPair(left, right, D_MAX)
    cv = cost_volume(model, pair)
    ew = edge_weights(left * 255)
    d_wta, d_mrf = wta(cv), optimize_mrf(cv, ew)
    print(f"energy: WTA {mrf_energy(d_wta, cv, ew):.2f}, MRF {mrf_energy(d_mrf, cv, ew):.2f}")

    gt = DisparityMap(np.full(left.shape, SHIFT), cv.valid)
    gt.valid[:, :S // 2 + D_MAX] = False  # windows that cannot see every disparity
    for name, d in (("WTA", d_wta), ("MRF", d_mrf)):
        for t, frac, _ in error_stats(d, gt, thresholds=(0, 1)):
            print(f"{name}: {100 * frac:5.1f}% of interior pixels within {t} px")


if __name__ == "__main__":
    main()
