"""Training a 2-channel network until it separates a small pair set.

Positive pairs are a random patch and a slightly noisy copy; negatives are
two unrelated patches. Each minibatch is augmented by one of the eight
flips/rotations, applied to both patches of a pair. The loss is the summed
hinge loss plus weight decay, minimised with momentum SGD.
"""
import os
import tempfile

import numpy as np

from patchcompare.models import build_reduced_model
from patchcompare.training import LabeledPair, TrainConfig, pair_sampler, sign_accuracy, train


def make_pairs(n, size, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        a = rng.standard_normal((size, size))
        if i % 2 == 0:
            pairs.append(LabeledPair(a, a + 0.05 * rng.standard_normal((size, size)), 1))
        else:
            pairs.append(LabeledPair(a, rng.standard_normal((size, size)), -1))
    return pairs


def main():
    pairs = make_pairs(32, 16, seed=0)
    model = build_reduced_model("2ch", seed=0)
    print(f"before training: sign accuracy {sign_accuracy(model, pairs):.2f}")

    cfg = TrainConfig(iterations=2000, learning_rate=0.003, batch_size=32, seed=0, log_every=5)
    with tempfile.TemporaryDirectory() as tmp:
        telemetry = os.path.join(tmp, "telemetry.csv")

        def stop_when_separated(it, loss, m):
            return it % 20 == 0 and sign_accuracy(m, pairs) == 1.0

        result = train(model, pair_sampler(pairs), cfg, telemetry=telemetry, callback=stop_when_separated)
        with open(telemetry) as fh:
            print("telemetry:", *fh.read().splitlines()[:4], "...", sep="\n  ")

    print(f"stopped after {result.iterations} iterations ({result.seconds:.1f}s)")
    print(f"after training: sign accuracy {sign_accuracy(model, pairs):.2f}")


if __name__ == "__main__":
    main()
