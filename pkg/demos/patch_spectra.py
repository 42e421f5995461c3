"""
How low-rank are natural image patches?
=======================================

Cuts the scikit-image sample pictures into 33x33 patches and looks at the
singular values of each patch.  A few directions carry almost all of the
energy, which is what a rank-r image component can exploit.
"""

import numpy as np

from lrcs.imaging import energy_ratio, extract_patches, pad_to_block, singular_spectrum
from lrcs.sample_data import TEST_IMAGES, TRAIN_IMAGES, load_named

spectra = []
for name in TRAIN_IMAGES + TEST_IMAGES:
    img, _ = pad_to_block(load_named(name))
    for patch in extract_patches(img, 33, 33).patches:
        if patch.max() > patch.min():
            spectra.append(singular_spectrum(patch))
spectra = np.array(spectra)
print(f"{len(spectra)} patches from {len(TRAIN_IMAGES + TEST_IMAGES)} images")

# every row is sorted, largest first
assert np.all(np.diff(spectra, axis=1) <= 1e-9)

rel = spectra / spectra[:, :1]
print(" r   median sigma_r/sigma_1   mean energy in top r")
for r in (1, 2, 4, 8, 16, 33):
    energy = np.mean([energy_ratio(s, r) for s in spectra])
    print(f"{r:2d}   {np.median(rel[:, r - 1]):22.4f}   {energy:20.4f}")

# a random patch with the same pixel statistics has no such decay
rng = np.random.default_rng(0)
noise = singular_spectrum(rng.permutation(extract_patches(img, 33, 33).patches[0].ravel())
                          .reshape(33, 33))
print(f"shuffled-pixel patch, sigma_16/sigma_1: {noise[15] / noise[0]:.4f}")
