"""MIRNet-v2 building blocks and the full restoration model.

Parameters live in a flat, ordered :class:`ParamStore`. The model layout is
enumerated once by :func:`param_layout`; forward functions look tensors up
by dotted name. The two (or more) RCB columns of a stream share one
parameter set: names under ``<mrb>.col<c>.rcb<k>`` are aliases of
``<mrb>.rcb<k>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .config import ModelConfig
from .nn import ConvParams, ResampleParams, activation, conv2d, downsample2x, upsample2x
from .tensor import (
    FLOAT32,
    ShapeError,
    Tensor,
    add,
    concat,
    global_avg_pool,
    matmul,
    mul,
    narrow,
    reshape,
    scale,
    softmax,
    stack,
    take,
)


class ParamStore:
    """Named, ordered learnable tensors with alias support.

    Iteration, ``len`` and ``num_params`` cover unique tensors only.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._aliases: dict[str, str] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors or name in self._aliases:
            raise KeyError(f"duplicate parameter {name!r}")
        self._tensors[name] = tensor

    def alias(self, name: str, target: str) -> None:
        target = self.canonical(target)
        if target not in self._tensors:
            raise KeyError(f"alias target {target!r} missing")
        if name in self._tensors:
            raise KeyError(f"{name!r} already names a tensor")
        self._aliases[name] = target

    def canonical(self, name: str) -> str:
        return self._aliases.get(name, name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[self.canonical(name)]

    def get(self, name: str, default=None):
        return self._tensors.get(self.canonical(name), default)

    def __contains__(self, name: str) -> bool:
        return self.canonical(name) in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def aliases(self) -> dict[str, str]:
        return dict(self._aliases)

    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def set_requires_grad(self, flag: bool = True) -> "ParamStore":
        for t in self._tensors.values():
            t.requires_grad = flag
        return self

    def map(self, fn) -> "ParamStore":
        """New store with ``fn(array)`` applied to each unique tensor; aliases kept."""
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, Tensor(fn(t.data)))
        for a, target in self._aliases.items():
            out.alias(a, target)
        return out

    def astype(self, dtype) -> "ParamStore":
        return self.map(lambda a: a.astype(dtype, copy=True))

    def copy(self) -> "ParamStore":
        return self.map(lambda a: a.copy())


# ---------------------------------------------------------------------------
# layout

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    is_bias: bool = False
    branch_end: bool = False  # last layer of a residual branch


@dataclass
class Layout:
    specs: list[ParamSpec] = field(default_factory=list)
    aliases: dict[str, str] = field(default_factory=dict)

    def conv(self, name: str, cin: int, cout: int, k: int, groups: int = 1, bias: bool = False,
             branch_end: bool = False) -> None:
        fan_in = (cin // groups) * k * k
        self.specs.append(ParamSpec(f"{name}.weight", (cout, cin // groups, k, k), fan_in, branch_end=branch_end))
        if bias:
            self.specs.append(ParamSpec(f"{name}.bias", (cout,), fan_in, is_bias=True))

    def alias_prefix(self, alias: str, target: str) -> None:
        for s in self.specs:
            if s.name.startswith(target + "."):
                self.aliases[alias + s.name[len(target):]] = s.name


def _rcb_layout(lay: Layout, pre: str, c: int, cfg: ModelConfig) -> None:
    v = cfg.rcb_variant
    if v == "none":
        return
    lay.conv(f"{pre}.gconv1", c, c, 3, cfg.groups, bias=cfg.conv_bias)
    lay.conv(f"{pre}.gconv2", c, c, 3, cfg.groups, bias=cfg.conv_bias, branch_end=v == "resblock")
    if v == "resblock":
        return
    lay.conv(f"{pre}.cm_mask", c, 1, 1)
    if v == "rcb":
        h = cfg.cm_hidden(c)
        lay.conv(f"{pre}.cm_t1", c, h, 1)
        lay.conv(f"{pre}.cm_t2", h, c, 1)
    lay.conv(f"{pre}.w_last", c, c, 1, branch_end=True)


def _fusion_layout(lay: Layout, pre: str, c: int, n: int, cfg: ModelConfig) -> None:
    if cfg.fusion == "skff":
        r = cfg.skff_hidden(c)
        lay.conv(f"{pre}.down", c, r, 1)
        for i in range(n):
            lay.conv(f"{pre}.up{i}", r, c, 1)
    elif cfg.fusion == "concat":
        lay.conv(f"{pre}.proj", n * c, c, 1)


def _mrb_layout(lay: Layout, pre: str, cfg: ModelConfig) -> None:
    ch = cfg.stream_channels
    s = cfg.n_streams
    for k in range(1, s):
        lay.conv(f"{pre}.down{k}", ch[k - 1], ch[k], 1)
    for k in range(s):
        _rcb_layout(lay, f"{pre}.rcb{k}", ch[k], cfg)
    for c in range(cfg.n_cols):
        for k in range(s):
            lay.alias_prefix(f"{pre}.col{c}.rcb{k}", f"{pre}.rcb{k}")
    if cfg.skff_intermediate:
        for c in range(cfg.n_cols):
            for k in range(s - 1):
                lay.conv(f"{pre}.col{c}.up{k}", ch[k + 1], ch[k], 1)
                _fusion_layout(lay, f"{pre}.col{c}.fuse{k}", ch[k], 2, cfg)
    if s > 1:
        for k in range(1, s):
            for lvl in range(k, 0, -1):
                lay.conv(f"{pre}.final.up{k}.{lvl}", ch[lvl], ch[lvl - 1], 1)
        _fusion_layout(lay, f"{pre}.final.fuse", ch[0], s, cfg)
    lay.conv(f"{pre}.out", ch[0], ch[0], 1, branch_end=cfg.residual)


def param_layout(cfg: ModelConfig) -> Layout:
    lay = Layout()
    c0 = cfg.feat_channels
    lay.conv("head", cfg.in_channels, c0, 3, bias=cfg.conv_bias)
    for i in range(cfg.n_rrg):
        for j in range(cfg.n_mrb):
            _mrb_layout(lay, f"rrg{i}.mrb{j}", cfg)
        lay.conv(f"rrg{i}.conv", c0, c0, 3, bias=cfg.conv_bias, branch_end=cfg.residual)
    lay.conv("tail", c0, cfg.out_channels, 3, bias=cfg.conv_bias, branch_end=True)
    return lay


def init_params(cfg: ModelConfig, seed: int = 0, dtype=FLOAT32, branch_gain: float = 1.0) -> ParamStore:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, seeded.

    ``branch_gain`` multiplies the weights of the last layer in every
    residual branch (RCB output projection, MRB output conv, RRG conv, tail).
    0 starts the network at the identity map, which trains far better than
    plain He scaling because the stacked residual sums otherwise begin large.
    The random draws do not depend on the gain.
    """
    rng = np.random.default_rng(seed)
    lay = param_layout(cfg)
    store = ParamStore()
    for spec in lay.specs:
        if spec.is_bias:
            data = np.zeros(spec.shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
            if spec.branch_end:
                data = data * branch_gain
            data = data.astype(dtype)
        store.add(spec.name, Tensor(data, dtype=dtype))
    for alias, target in lay.aliases.items():
        store.alias(alias, target)
    return store


def zero_params(cfg: ModelConfig, dtype=FLOAT32) -> ParamStore:
    return init_params(cfg, 0, dtype).map(np.zeros_like)


# ---------------------------------------------------------------------------
# parameter views

@dataclass
class SKFFParams:
    down: ConvParams
    ups: list[ConvParams]

    @property
    def n(self) -> int:
        return len(self.ups)

    def num_params(self) -> int:
        return self.down.num_params() + sum(u.num_params() for u in self.ups)


@dataclass
class RCBParams:
    gconv1: ConvParams | None = None
    gconv2: ConvParams | None = None
    cm_mask: ConvParams | None = None
    cm_t1: ConvParams | None = None
    cm_t2: ConvParams | None = None
    w_last: ConvParams | None = None

    @property
    def variant(self) -> str:
        if self.gconv1 is None:
            return "none"
        if self.cm_mask is None:
            return "resblock"
        if self.cm_t1 is None:
            return "no_transform"
        return "rcb"


def conv_view(store: ParamStore, name: str, padding: int | None = None, groups: int = 1) -> ConvParams:
    w = store[f"{name}.weight"]
    pad = (w.shape[2] // 2) if padding is None else padding
    return ConvParams(w, store.get(f"{name}.bias"), stride=1, padding=pad, groups=groups)


def skff_view(store: ParamStore, pre: str, n: int) -> SKFFParams:
    return SKFFParams(conv_view(store, f"{pre}.down"), [conv_view(store, f"{pre}.up{i}") for i in range(n)])


def rcb_view(store: ParamStore, pre: str, cfg: ModelConfig) -> RCBParams:
    if f"{pre}.gconv1.weight" not in store:
        return RCBParams()
    opt = lambda nm: conv_view(store, f"{pre}.{nm}") if f"{pre}.{nm}.weight" in store else None
    return RCBParams(
        gconv1=conv_view(store, f"{pre}.gconv1", groups=cfg.groups),
        gconv2=conv_view(store, f"{pre}.gconv2", groups=cfg.groups),
        cm_mask=opt("cm_mask"),
        cm_t1=opt("cm_t1"),
        cm_t2=opt("cm_t2"),
        w_last=opt("w_last"),
    )


# ---------------------------------------------------------------------------
# blocks

def _sum(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def skff_forward(inputs: Sequence[Tensor], p: SKFFParams, return_weights: bool = False):
    """Selective kernel feature fusion of n equally shaped streams.

    Fuse: L = sum L_i, s = GAP(L), z = down(s), v_i = up_i(z).
    Select: per (batch, channel) softmax over the stream axis, U = sum s_i * L_i.
    With ``return_weights`` the stacked weights [N, n, C, 1, 1] are returned too.
    """
    n = len(inputs)
    if n < 2:
        raise ShapeError("SKFF needs at least two inputs")
    if len({t.shape for t in inputs}) != 1:
        raise ShapeError(f"SKFF inputs differ in shape: {[t.shape for t in inputs]}")
    if p.n != n:
        raise ShapeError(f"SKFF params built for {p.n} streams, got {n}")
    s = global_avg_pool(_sum(inputs))
    z = conv2d(s, p.down)
    weights = softmax(stack([conv2d(z, up) for up in p.ups], axis=1), axis=1)
    out = _sum([mul(take(weights, i, axis=1), x) for i, x in enumerate(inputs)])
    return (out, weights) if return_weights else out


def context_module(f_b: Tensor, p: RCBParams, return_attention: bool = False):
    """Global context: spatial-softmax pooling, channel transform, broadcast add."""
    n, c, h, w = f_b.shape
    logits = reshape(conv2d(f_b, p.cm_mask), (n, h * w))
    attn = softmax(logits, axis=1)
    f_d = matmul(reshape(f_b, (n, c, h * w)), reshape(attn, (n, h * w, 1)))
    f_d = reshape(f_d, (n, c, 1, 1))
    if p.cm_t1 is not None:
        f_e = conv2d(activation(conv2d(f_d, p.cm_t1)), p.cm_t2)
    else:
        f_e = f_d
    out = add(f_b, f_e)
    return (out, attn) if return_attention else out


def rcb_forward(x: Tensor, p: RCBParams) -> Tensor:
    """x + W(CM(F_b)) with F_b = gconv2(relu(gconv1(x)))."""
    variant = p.variant
    if variant == "none":
        return x
    if p.gconv1.in_channels != x.shape[1]:
        raise ShapeError(f"RCB built for {p.gconv1.in_channels} channels, input has {x.shape[1]}")
    f_b = conv2d(activation(conv2d(x, p.gconv1)), p.gconv2)
    if variant == "resblock":
        return add(x, f_b)
    return add(x, conv2d(context_module(f_b, p), p.w_last))


def fuse(inputs: Sequence[Tensor], store: ParamStore, pre: str, cfg: ModelConfig) -> Tensor:
    if cfg.fusion == "skff":
        return skff_forward(inputs, skff_view(store, pre, len(inputs)))
    if cfg.fusion == "concat":
        return conv2d(concat(inputs, axis=1), conv_view(store, f"{pre}.proj"))
    return _sum(inputs)


def _up(store: ParamStore, name: str) -> ResampleParams:
    return ResampleParams("up2x", conv_view(store, name))


def mrb_forward(x: Tensor, store: ParamStore, cfg: ModelConfig, pre: str = "rrg0.mrb0") -> Tensor:
    """Multi-scale residual block at full resolution C0 channels.

    Streams are created by chained 2x downsampling. Each column applies the
    stream's (shared) RCB, then fuses low->high between adjacent streams,
    lowest pair first so each stream sees its already-updated neighbour.
    A final fusion brings every stream to full resolution, then a 1x1
    output conv and the skip connection.
    """
    s_count = cfg.n_streams
    m = cfg.scale_factor
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(f"MRB input {x.shape[2]}x{x.shape[3]} not divisible by {m}")
    streams = [x]
    for k in range(1, s_count):
        streams.append(downsample2x(streams[-1], ResampleParams("down2x", conv_view(store, f"{pre}.down{k}"))))
    for c in range(cfg.n_cols):
        streams = [rcb_forward(t, rcb_view(store, f"{pre}.col{c}.rcb{k}", cfg)) for k, t in enumerate(streams)]
        if cfg.skff_intermediate:
            for k in range(s_count - 2, -1, -1):
                lifted = upsample2x(streams[k + 1], _up(store, f"{pre}.col{c}.up{k}"))
                streams[k] = fuse([streams[k], lifted], store, f"{pre}.col{c}.fuse{k}", cfg)
    y = streams[0]
    if s_count > 1:
        full = [streams[0]]
        for k in range(1, s_count):
            t = streams[k]
            for lvl in range(k, 0, -1):
                t = upsample2x(t, _up(store, f"{pre}.final.up{k}.{lvl}"))
            full.append(t)
        y = fuse(full, store, f"{pre}.final.fuse", cfg)
    y = conv2d(y, conv_view(store, f"{pre}.out"))
    return add(x, y) if cfg.residual else y


def rrg_forward(x: Tensor, store: ParamStore, cfg: ModelConfig, index: int = 0) -> Tensor:
    """n_mrb MRBs, a trailing 3x3 conv, and the group skip."""
    y = x
    for j in range(cfg.n_mrb):
        y = mrb_forward(y, store, cfg, f"rrg{index}.mrb{j}")
    y = conv2d(y, conv_view(store, f"rrg{index}.conv"))
    return add(x, y) if cfg.residual else y


def model_forward(image: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Restored image = base + R, R = tail(RRG_N(...RRG_1(head(image))))).

    For 6-channel dual-pixel input the base is the mean of the two views.
    """
    cfg.check_input(image.shape)
    feats = conv2d(image, conv_view(store, "head"))
    for i in range(cfg.n_rrg):
        feats = rrg_forward(feats, store, cfg, i)
    residual = conv2d(feats, conv_view(store, "tail"))
    if cfg.in_channels == cfg.out_channels:
        base = image
    else:
        base = scale(add(narrow(image, 1, 0, 3), narrow(image, 1, 3, 3)), 0.5)
    return add(base, residual)
