"""
Training a small unfolded network end to end
============================================

Writes the scikit-image sample pictures to a scratch folder, trains a
two-stage network for a few epochs at a 25% sampling ratio and evaluates it
on held-out pictures.  The run takes under a minute on one CPU core; the
acceptance suite trains the full desk-scale configuration instead.

Usage: python demos/train_small.py [scratch-dir]
"""

import os
import sys
import tempfile

import numpy as np

from lrcs.checkpoint import load_checkpoint
from lrcs.imaging import load_gray, psnr, save_pgm
from lrcs.sample_data import write_corpus
from lrcs.train import TrainConfig, evaluate, reconstruct_image, train

root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="lrcs-demo-")
train_dir, test_dir = write_corpus(root)
print(f"images written under {root}")

cfg = TrainConfig(ratio=0.25, stages=2, rank=4, channels=8, epochs=4, finetune_epochs=1,
                  max_patches=400, finetune_patches=20, data_dir=train_dir,
                  out_dir=os.path.join(root, "run"))

# each epoch prints one key=value line: loss, validation psnr, orthogonality
checkpoint = train(cfg)

report = evaluate(checkpoint, test_dir, cfg.ratio)
print("\nheld-out pictures")
for name, p, s, stages in zip(report.images, report.psnr, report.ssim, report.stage_psnr):
    print(f"  {name:26s} x0 {stages[0]:6.2f} dB -> x{cfg.stages} {p:6.2f} dB  ssim {s:.3f}")
print("mean psnr by stage:", np.round(report.mean_stage_psnr, 2))

# the learned sampling matrix drifts only slightly from orthonormal rows
params, manifest = load_checkpoint(checkpoint)
phi = params.op.phi.data.astype(np.float64)
print(f"||phi phi^T - I||_F^2 / M^2 = {np.sum((phi @ phi.T - np.eye(len(phi))) ** 2) / len(phi) ** 2:.2e}")

# one picture through the whole pipeline, written next to the checkpoint
ref = load_gray(os.path.join(test_dir, report.images[0]))
x, stages = reconstruct_image(params, ref)
save_pgm(os.path.join(root, "reconstruction.pgm"), x)
print(f"wrote {os.path.join(root, 'reconstruction.pgm')} ({psnr(x, ref):.2f} dB)")
