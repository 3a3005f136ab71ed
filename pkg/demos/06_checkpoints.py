"""Saving and restoring a model.

A checkpoint is a short text header followed by float32 parameter blobs (see
docs/FORMATS.md). A float32 model comes back bit-for-bit, so its scores are
identical before and after the round trip.
"""
import os
import tempfile

import numpy as np

from patchcompare.checkpoint import load_checkpoint, load_model, save_checkpoint
from patchcompare.dataset import Normalization
from patchcompare.models import build_model


def main():
    model = build_model("siam-2stream", seed=7, dtype=np.float32)
    model.normalization = Normalization(0.45, 0.27, "liberty")
    rng = np.random.default_rng(0)
    P1, P2 = rng.random((4, 64, 64), dtype=np.float32), rng.random((4, 64, 64), dtype=np.float32)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_checkpoint(path, model, meta={"note": "demo"})
        with open(path, "rb") as fh:
            header = fh.read().split(b"end\n")[0].decode()
        print(header)
        print(f"file size: {os.path.getsize(path):,d} bytes")
        print(f"blobs: {list(load_checkpoint(path).params)[:3]} ...")
        restored = load_model(path)

    before, after = model.forward_batch(P1, P2), restored.forward_batch(P1, P2)
    print("scores before:", before)
    print("scores after: ", after)
    print("bitwise equal:", np.array_equal(before, after))


if __name__ == "__main__":
    main()
