"""
Training a tiny denoiser
========================

Gaussian noise (sigma 25 on the 0-255 scale) on procedural images, with a
growing patch size. Pass an iteration count to train longer, e.g.
``python demos/04_train_tiny_denoiser.py 2000``.
"""

import sys
import tempfile
from pathlib import Path


from mirnetv2.config import ModelConfig, TrainConfig
from mirnetv2.data import PairedDataset, procedural_images
from mirnetv2.metrics import psnr, ssim
from mirnetv2.tensor import set_sequential
from mirnetv2.train import load_trained, parse_metrics_log, restore, train_loop

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
set_sequential(True)

# 20 training and 4 validation images; training noise is redrawn every sample
images = procedural_images(24, 64, seed=0)
dataset = PairedDataset.synthetic(images, {"kind": "gaussian", "sigma": 25}, val_count=4)

cfg = ModelConfig.tiny()
train_cfg = TrainConfig(total_iters=iters, batch_size=8, val_every=max(iters // 5, 1),
                        patch_schedule=((0, 32), (0.25, 36), (0.5, 40), (0.75, 48)))
out_dir = Path(tempfile.mkdtemp(prefix="tiny_denoiser_"))
result = train_loop(cfg, train_cfg, dataset, out_dir, verbose=True)
print(f"noisy input {result.input_psnr:.2f} dB -> restored {result.val_psnr:.2f} dB in {result.wall_time:.0f} s")

# the log is plain TSV; patch size follows the schedule
log = parse_metrics_log((out_dir / "metrics.tsv").read_text())
print("patch sizes seen:", sorted({row["patch"] for row in log}))

# reload the checkpoint and restore one validation image
cfg2, store, state = load_trained(out_dir / "checkpoint.erck")
pair = dataset.val[0]
clean = restore(pair.degraded, store, cfg2).data.clip(0, 1)
print(f"{pair.name}: PSNR {psnr(pair.degraded.data, pair.clean.data):.2f} -> {psnr(clean, pair.clean.data):.2f} dB, "
      f"SSIM {ssim(pair.degraded.data, pair.clean.data):.3f} -> {ssim(clean, pair.clean.data):.3f}")
print("Adam steps stored in the checkpoint:", state.iter)
