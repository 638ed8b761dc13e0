"""Parameter / FLOP / convolution / activation accounting.

Counting conventions (shared with the op counter in :mod:`mirnetv2.tensor`):

* one multiply-accumulate counts as one FLOP, as do each bias add and each
  elementwise add, multiply, ReLU;
* softmax counts 3 per element, average pooling 1 per input element,
  bilinear x2 upsampling 4 per output element;
* activations are the element counts of every op output (views such as
  reshape/stack/slice are free);
* a shared RCB counts its convolutions on every application but its
  parameters once.

:func:`count_costs` walks the architecture symbolically, so the full-size
model at 256x256 is accounted in milliseconds without running it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .blocks import Layout, _fusion_layout, param_layout
from .config import ModelConfig


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    activations: int


@dataclass
class CostReport:
    records: list[LayerCost] = field(default_factory=list)
    size: tuple[int, int] = (256, 256)
    batch: int = 1

    @property
    def params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.records)

    @property
    def conv_count(self) -> int:
        return sum(1 for r in self.records if r.kind == "conv2d")

    @property
    def activation_count(self) -> int:
        return sum(r.activations for r in self.records)

    def totals(self) -> dict[str, int | str]:
        return {
            "size": f"{self.size[0]}x{self.size[1]}",
            "params": self.params,
            "flops": self.flops,
            "conv_count": self.conv_count,
            "activation_count": self.activation_count,
        }

    def to_text(self, include_layers: bool = True) -> str:
        """Tab-separated per-layer table, then a ``[totals]`` key-value block."""
        buf = io.StringIO()
        if include_layers:
            buf.write("layer\tkind\tparams\tflops\tactivations\n")
            for r in self.records:
                buf.write(f"{r.name}\t{r.kind}\t{r.params}\t{r.flops}\t{r.activations}\n")
            buf.write("\n")
        buf.write("[totals]\n")
        for k, v in self.totals().items():
            buf.write(f"{k} = {v}\n")
        return buf.getvalue()


def parse_cost_text(text: str) -> tuple[list[LayerCost], dict[str, dict[str, str]]]:
    """Inverse of :meth:`CostReport.to_text`."""
    records, totals = [], {}
    section = "layers"
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("["):
            section = line.strip("[] ")
            continue
        if section == "layers":
            if line.startswith("layer\t"):
                continue
            name, kind, p, f, a = line.split("\t")
            records.append(LayerCost(name, kind, int(p), int(f), int(a)))
        else:
            k, v = (s.strip() for s in line.split("=", 1))
            totals.setdefault(section, {})[k] = v
    return records, totals


class _Walker:
    def __init__(self, cfg: ModelConfig, batch: int):
        self.cfg = cfg
        self.n = batch
        self.records: list[LayerCost] = []
        self._seen: set[str] = set()

    def conv(self, name: str, owner: str, cin: int, cout: int, k: int, h: int, w: int,
             groups: int = 1, bias: bool = False) -> None:
        out = self.n * cout * h * w
        flops = out * (cin // groups) * k * k + (out if bias else 0)
        params = 0
        if owner not in self._seen:
            self._seen.add(owner)
            params = cout * (cin // groups) * k * k + (cout if bias else 0)
        self.records.append(LayerCost(name, "conv2d", params, flops, out))

    def op(self, name: str, kind: str, flops: int, out: int) -> None:
        self.records.append(LayerCost(name, kind, 0, flops, out))

    # -- blocks ------------------------------------------------------------

    def fusion(self, pre: str, c: int, n_in: int, h: int, w: int) -> None:
        n, numel = self.n, self.n * c * h * w
        kind = self.cfg.fusion
        if kind == "concat":
            self.conv(f"{pre}.proj", f"{pre}.proj", n_in * c, c, 1, h, w)
            return
        for i in range(n_in - 1):
            self.op(f"{pre}.sum{i}", "add", numel, numel)
        if kind == "sum":
            return
        r = self.cfg.skff_hidden(c)
        self.op(f"{pre}.gap", "pool", numel, n * c)
        self.conv(f"{pre}.down", f"{pre}.down", c, r, 1, 1, 1)
        for i in range(n_in):
            self.conv(f"{pre}.up{i}", f"{pre}.up{i}", r, c, 1, 1, 1)
        self.op(f"{pre}.softmax", "softmax", 3 * n * n_in * c, n * n_in * c)
        for i in range(n_in):
            self.op(f"{pre}.select{i}", "mul", numel, numel)
        for i in range(n_in - 1):
            self.op(f"{pre}.aggregate{i}", "add", numel, numel)

    def rcb(self, name: str, owner: str, c: int, h: int, w: int) -> None:
        cfg = self.cfg
        variant = cfg.rcb_variant
        if variant == "none":
            return
        n, numel = self.n, self.n * c * h * w
        b = cfg.conv_bias
        self.conv(f"{name}.gconv1", f"{owner}.gconv1", c, c, 3, h, w, cfg.groups, b)
        self.op(f"{name}.act", "relu", numel, numel)
        self.conv(f"{name}.gconv2", f"{owner}.gconv2", c, c, 3, h, w, cfg.groups, b)
        if variant == "resblock":
            self.op(f"{name}.residual", "add", numel, numel)
            return
        hw = h * w
        self.conv(f"{name}.cm_mask", f"{owner}.cm_mask", c, 1, 1, h, w)
        self.op(f"{name}.cm_softmax", "softmax", 3 * n * hw, n * hw)
        self.op(f"{name}.cm_pool", "matmul", n * c * hw, n * c)
        if variant == "rcb":
            hid = cfg.cm_hidden(c)
            self.conv(f"{name}.cm_t1", f"{owner}.cm_t1", c, hid, 1, 1, 1)
            self.op(f"{name}.cm_act", "relu", n * hid, n * hid)
            self.conv(f"{name}.cm_t2", f"{owner}.cm_t2", hid, c, 1, 1, 1)
        self.op(f"{name}.cm_fuse", "add", numel, numel)
        self.conv(f"{name}.w_last", f"{owner}.w_last", c, c, 1, h, w)
        self.op(f"{name}.residual", "add", numel, numel)

    def upsample(self, name: str, cin: int, cout: int, h: int, w: int) -> None:
        """Projection at (h, w), then bilinear to (2h, 2w)."""
        self.conv(f"{name}.proj", name, cin, cout, 1, h, w)
        out = self.n * cout * 4 * h * w
        self.op(f"{name}.bilinear", "resample", 4 * out, out)

    def mrb(self, pre: str, h: int, w: int) -> None:
        cfg = self.cfg
        ch = cfg.stream_channels
        s = cfg.n_streams
        sizes = [(h >> k, w >> k) for k in range(s)]
        for k in range(1, s):
            ph, pw = sizes[k - 1]
            self.op(f"{pre}.down{k}.pool", "pool", self.n * ch[k - 1] * ph * pw, self.n * ch[k - 1] * ph * pw // 4)
            self.conv(f"{pre}.down{k}.proj", f"{pre}.down{k}", ch[k - 1], ch[k], 1, *sizes[k])
        for c in range(cfg.n_cols):
            for k in range(s):
                self.rcb(f"{pre}.col{c}.rcb{k}", f"{pre}.rcb{k}", ch[k], *sizes[k])
            if cfg.skff_intermediate:
                for k in range(s - 2, -1, -1):
                    self.upsample(f"{pre}.col{c}.up{k}", ch[k + 1], ch[k], *sizes[k + 1])
                    self.fusion(f"{pre}.col{c}.fuse{k}", ch[k], 2, *sizes[k])
        if s > 1:
            for k in range(1, s):
                for lvl in range(k, 0, -1):
                    self.upsample(f"{pre}.final.up{k}.{lvl}", ch[lvl], ch[lvl - 1], *sizes[lvl])
            self.fusion(f"{pre}.final.fuse", ch[0], s, h, w)
        self.conv(f"{pre}.out", f"{pre}.out", ch[0], ch[0], 1, h, w)
        if cfg.residual:
            numel = self.n * ch[0] * h * w
            self.op(f"{pre}.skip", "add", numel, numel)

    def model(self, h: int, w: int) -> None:
        cfg = self.cfg
        c0, b = cfg.feat_channels, cfg.conv_bias
        self.conv("head", "head", cfg.in_channels, c0, 3, h, w, bias=b)
        for i in range(cfg.n_rrg):
            for j in range(cfg.n_mrb):
                self.mrb(f"rrg{i}.mrb{j}", h, w)
            self.conv(f"rrg{i}.conv", f"rrg{i}.conv", c0, c0, 3, h, w, bias=b)
            if cfg.residual:
                numel = self.n * c0 * h * w
                self.op(f"rrg{i}.skip", "add", numel, numel)
        self.conv("tail", "tail", c0, cfg.out_channels, 3, h, w, bias=b)
        out = self.n * cfg.out_channels * h * w
        if cfg.in_channels != cfg.out_channels:
            self.op("base.sum", "add", out, out)
            self.op("base.half", "mul", out, out)
        self.op("restore", "add", out, out)


def count_costs(cfg: ModelConfig, height: int = 256, width: int = 256, batch: int = 1) -> CostReport:
    cfg.check_input((batch, cfg.in_channels, height, width))
    walker = _Walker(cfg, batch)
    walker.model(height, width)
    return CostReport(walker.records, (height, width), batch)


def enumerate_params(cfg: ModelConfig) -> int:
    """Unique parameter count from the enumerated layout (aliases excluded)."""
    return sum(_prod(s.shape) for s in param_layout(cfg).specs)


def _prod(shape) -> int:
    out = 1
    for d in shape:
        out *= d
    return out


def analytic_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of the layout enumeration."""
    ch, g, s = cfg.stream_channels, cfg.groups, cfg.n_streams
    b = 1 if cfg.conv_bias else 0

    def rcb(c):
        v = cfg.rcb_variant
        if v == "none":
            return 0
        total = 2 * (9 * c * c // g + b * c)
        if v == "resblock":
            return total
        total += c + c * c  # mask + W
        if v == "rcb":
            total += 2 * c * cfg.cm_hidden(c)
        return total

    def fusion(c, n):
        if cfg.fusion == "skff":
            return (n + 1) * c * cfg.skff_hidden(c)
        if cfg.fusion == "concat":
            return n * c * c
        return 0

    mrb = sum(ch[k - 1] * ch[k] for k in range(1, s))
    mrb += sum(rcb(c) for c in ch)
    if cfg.skff_intermediate:
        mrb += cfg.n_cols * sum(ch[k + 1] * ch[k] + fusion(ch[k], 2) for k in range(s - 1))
    if s > 1:
        mrb += sum(ch[lvl] * ch[lvl - 1] for k in range(1, s) for lvl in range(1, k + 1))
        mrb += fusion(ch[0], s)
    mrb += ch[0] * ch[0]
    c0 = ch[0]
    rrg = cfg.n_mrb * mrb + 9 * c0 * c0 + b * c0
    head = 9 * cfg.in_channels * c0 + b * c0
    tail = 9 * c0 * cfg.out_channels + b * cfg.out_channels
    return head + cfg.n_rrg * rrg + tail


def fusion_params(channels: int, n_inputs: int, fusion: str) -> int:
    """Parameters of one fusion module ("sum", "concat" or "skff")."""
    cfg = ModelConfig(stream_channels=(channels,), fusion=fusion, groups=1)
    lay = Layout()
    _fusion_layout(lay, "fuse", channels, n_inputs, cfg)
    return sum(_prod(s.shape) for s in lay.specs)


def fusion_table(channels: int = 64, n_inputs: int = 2) -> dict[str, int]:
    return {kind: fusion_params(channels, n_inputs, kind) for kind in ("sum", "concat", "skff")}
