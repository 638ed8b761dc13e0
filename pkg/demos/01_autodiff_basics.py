"""
Tensors, the tape and gradients
===============================

The package carries its own small reverse-mode autodiff. Ops run eagerly
on numpy arrays; a Tape records them so backward() can walk the graph.
"""

import numpy as np

from mirnetv2 import tensor as T
from mirnetv2.tensor import Tape, Tensor, numerical_gradient

# leaves that want gradients are marked at construction
x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
w = Tensor(np.array([[0.3], [-0.7]]), requires_grad=True)

# record a small computation: sum(relu(x @ w) ** 2)
with Tape() as tape:
    h = T.relu(T.matmul(x, w))
    loss = T.total(T.mul(h, h))
grads = tape.backward(loss)
print("loss:", loss.item())
print("d loss / d w:\n", grads[w])

# central differences agree (float64 is required for this check)
f = lambda: T.total(T.mul(T.relu(T.matmul(x, w)), T.relu(T.matmul(x, w)))).item()
print("finite differences:\n", numerical_gradient(f, w.data))

# a tape can only be walked once; its nodes are freed afterwards
try:
    tape.backward(loss)
except T.TapeError as exc:
    print("second backward:", exc)

# float32 is the default; mixing precisions is refused rather than promoted
a = Tensor([1.0, 2.0])
b = Tensor(np.array([1.0, 2.0]))
print(a.dtype, b.dtype)
try:
    T.add(a, b)
except T.DTypeMismatch as exc:
    print("mixed dtypes:", exc)

# the op counter tallies FLOPs and activations for whatever runs inside it
with T.count_ops() as counter:
    T.matmul(Tensor(np.ones((64, 32), np.float32)), Tensor(np.ones((32, 16), np.float32)))
print("matmul flops:", counter.flops, "outputs:", counter.activations)
