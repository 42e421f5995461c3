"""Natural test images from scikit-image, written out as 8-bit PGM files.

scikit-image ships a handful of photographs with its wheels, so no download
is needed.  This module is optional: it imports scikit-image lazily and only
the demos and the test suite use it.
"""

from __future__ import annotations

import os

import numpy as np

from .imaging import save_pgm, to_gray

# about 2000 patches of 33 x 33 at stride 33 (after block padding)
TRAIN_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "coins", "clock",
                "moon", "cell", "immunohistochemistry")
# disjoint from the training set; center-cropped to 264 x 264 (8 x 8 blocks)
TEST_IMAGES = ("camera", "hubble_deep_field", "brick")
TEST_CROP = 264


def load_named(name):
    """Gray ``[0, 1]`` version of ``skimage.data.<name>``."""
    from skimage import data

    img = np.asarray(getattr(data, name)())
    if img.ndim == 3:
        img = to_gray(img[..., :3] / 255.0)
    else:
        img = img / 255.0
    # round through 8 bits so files and in-memory arrays agree exactly
    return np.floor(img * 255 + 0.5) / 255.0


def center_crop(img, size):
    h, w = img.shape
    size = min(size, h, w)
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def write_images(directory, names, crop=None):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in names:
        img = load_named(name)
        if crop:
            img = center_crop(img, crop)
        path = os.path.join(directory, f"{name}.pgm")
        save_pgm(path, img)
        paths.append(path)
    return paths


def write_corpus(root):
    """``root/train`` and ``root/test`` image folders; returns both paths."""
    train_dir = os.path.join(root, "train")
    test_dir = os.path.join(root, "test")
    write_images(train_dir, TRAIN_IMAGES)
    write_images(test_dir, TEST_IMAGES, crop=TEST_CROP)
    return train_dir, test_dir


if __name__ == "__main__":
    import sys

    for path in write_corpus(sys.argv[1] if len(sys.argv) > 1 else "data"):
        print(path)
