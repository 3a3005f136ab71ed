"""Matching keypoints between two views related by a homography.

Keypoint patches are cut from each image and compared with a siamese
network's descriptors. Ground-truth correspondences are mutual nearest
neighbours after reprojection through the homography. Ranking every pair by
similarity gives a precision-recall curve and its mean average precision.
"""
import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from patchcompare.evaluation import extract_keypoint_patch, homography_match_eval
from patchcompare.models import build_model


def main():
    rng = np.random.default_rng(0)
    image1 = gaussian_filter(rng.random((200, 200)), 2.0)
    # the second view is the first translated by (+7, -4)
    H = np.array([[1, 0, 7], [0, 1, -4], [0, 0, 1]], float)
    image2 = affine_transform(image1, np.eye(2), offset=(4, -7), order=1)

    kp1 = np.c_[rng.uniform(40, 160, (25, 2)), np.full(25, 16.0)]
    kp2 = kp1.copy()
    kp2[:, 0] += 7
    kp2[:, 1] -= 4

    model = build_model("siam", mode="l2", seed=0)
    for name, view, kps in (("image 1", image1, kp1), ("image 2", image2, kp2)):
        patches = np.stack([extract_keypoint_patch(view, x, y, s) for x, y, s in kps])
        kps_desc = list(zip(kps, model.describe_batch(patches)))
        if name == "image 1":
            set1 = kps_desc
        else:
            set2 = kps_desc

    curve, m_ap = homography_match_eval([set1, set2], H)
    print(f"{len(kp1)} keypoints per view, {int(round(curve.recall[-1] * len(kp1)))} ground-truth matches")
    print(f"mAP with an untrained siamese network: {m_ap:.3f}")
    print(f"mAP a random ranking would give:       {1 / len(kp1):.3f}")


if __name__ == "__main__":
    main()
