"""
Fusion and context attention inside one block
=============================================

Build the tiny model, then look at the two attention mechanisms it
uses: the selective fusion weights over streams and the spatial
softmax of the context module.
"""

import numpy as np

from mirnetv2.blocks import context_module, init_params, model_forward, rcb_view, skff_forward, skff_view
from mirnetv2.config import ModelConfig
from mirnetv2.tensor import Tensor

cfg = ModelConfig.tiny()
store = init_params(cfg, seed=0)
print(f"{len(store)} parameter tensors, {sum(t.data.size for _, t in store.items()):,} values")

# shared RCBs: each column sees the same tensor object
a = store["rrg0.mrb0.col0.rcb0.gconv1.weight"]
b = store["rrg0.mrb0.col1.rcb0.gconv1.weight"]
print("columns share weights:", a is b)

# fusion weights: softmax over streams, one weight per (batch, stream, channel)
rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
y = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
fused, weights = skff_forward([x, y], skff_view(store, "rrg0.mrb0.col0.fuse0", 2), return_weights=True)
print("fusion weights shape:", weights.shape)
print("weights sum to one:", np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-6))

# context attention: one spatial softmax per image
out, attn = context_module(x, rcb_view(store, "rrg0.mrb0.rcb0", cfg), return_attention=True)
print("attention shape:", attn.shape, "per-image sums:", attn.data.reshape(2, -1).sum(axis=1))

# the whole model is residual, so zero weights give back the input exactly
from mirnetv2.blocks import zero_params

img = Tensor(rng.random((1, 3, 16, 16), dtype=np.float32))
same = model_forward(img, zero_params(cfg), cfg)
print("zero model is identity:", same.data.tobytes() == img.data.tobytes())
# plain He init everywhere gives a loud residual; training instead zeroes the
# last layer of each residual branch so the network starts as the identity
for gain in (1.0, 0.0):
    r = model_forward(img, init_params(cfg, seed=0, branch_gain=gain), cfg).data - img.data
    print(f"branch gain {gain}: residual std {r.std():.3g}")
