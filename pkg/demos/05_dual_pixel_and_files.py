"""
Dual-pixel input, image files and checkpoints
=============================================

A dual-pixel model takes the two sub-aperture views stacked on the
channel axis. This script fabricates the views, writes them as PNG,
and pushes them through a model loaded from a checkpoint.
"""

import tempfile
from pathlib import Path

import numpy as np

from mirnetv2.blocks import init_params
from mirnetv2.config import ModelConfig
from mirnetv2.data import defocus_dual_pixel, load_image, pad_to_multiple, procedural_images, save_image
from mirnetv2.formats import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from mirnetv2.tensor import Tensor
from mirnetv2.train import restore

work = Path(tempfile.mkdtemp(prefix="dual_pixel_"))
clean = procedural_images(1, 48, seed=3)[0]

# blurred views with opposite sub-pixel shifts, concatenated left first
views = defocus_dual_pixel(clean, blur=1.5, shift=1.0)
print("dual-pixel input:", views.shape)
save_image(Tensor(views.data[:, :3]), work / "left.png")
save_image(Tensor(views.data[:, 3:]), work / "right.png")
print("left view reloads within 8-bit rounding:",
      np.abs(load_image(work / "left.png").data - views.data[:, :3]).max() <= 0.5 / 255 + 1e-7)

# 6 input channels; the residual base is the mean of the two views
cfg = ModelConfig.tiny(in_channels=6)
save_checkpoint(work / "dp.erck", cfg, init_params(cfg, seed=1, branch_gain=0.0))
cfg2, store, meta, _ = load_checkpoint(work / "dp.erck")
print("checkpoint config round-trips:", cfg2 == cfg, "| size:", (work / "dp.erck").stat().st_size, "bytes")

# odd sizes are reflect-padded to a multiple of 4 and cropped back
odd = Tensor(views.data[:, :, :45, :47])
padded, extents = pad_to_multiple(odd, cfg.scale_factor)
print("padded", odd.shape[2:], "->", padded.shape[2:])
out = restore(odd, store, cfg2)
print("restored", out.shape, "| equals the view mean at zero init:",
      np.allclose(out.data, 0.5 * (odd.data[:, :3] + odd.data[:, 3:])))

# small fixtures use the ERTF tensor format
write_tensor(work / "views.ertf", views)
print("ERTF round-trip exact:", np.array_equal(read_tensor(work / "views.ertf").data, views.data))
