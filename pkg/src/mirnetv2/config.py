"""Configuration records and the dotted key-value run-config format.

Run configs are plain text, one ``section.key = value`` per line::

    # tiny denoising run
    model.n_rrg = 1
    model.stream_channels = 8, 12, 16
    train.total_iters = 200
    train.patch_schedule = 0:32, 0.5:48
    data.synth = gaussian sigma=25
    run.output_dir = runs/tiny

Lists are comma separated; the patch schedule is ``start_fraction:size``
pairs; recipes are a kind followed by ``name=value`` parameters.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

RCB_VARIANTS = ("rcb", "no_transform", "resblock", "none")
FUSIONS = ("skff", "sum", "concat")
TASKS = ("denoise", "deblur_dp", "sr_refine", "enhance")
CHARBONNIER_MODES = ("per_pixel_mean", "global_norm")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class ModelConfig:
    n_rrg: int = 4
    n_mrb: int = 2
    stream_channels: tuple[int, ...] = (80, 120, 180)
    n_cols: int = 2
    groups: int = 2
    in_channels: int = 3
    out_channels: int = 3
    eps: float = 1e-3
    activation: str = "relu"
    conv_bias: bool = True
    rcb_variant: str = "rcb"
    fusion: str = "skff"
    skff_intermediate: bool = True
    residual: bool = True
    skff_reduction: int = 8
    skff_min_channels: int = 4
    cm_reduction: int = 4

    def __post_init__(self):
        self.stream_channels = tuple(int(c) for c in self.stream_channels)
        self.validate()

    @property
    def n_streams(self) -> int:
        return len(self.stream_channels)

    @property
    def feat_channels(self) -> int:
        return self.stream_channels[0]

    @property
    def stream_scales(self) -> tuple[float, ...]:
        return tuple(0.5 ** k for k in range(self.n_streams))

    @property
    def scale_factor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** (self.n_streams - 1)

    def skff_hidden(self, channels: int) -> int:
        return max(channels // self.skff_reduction, self.skff_min_channels)

    def cm_hidden(self, channels: int) -> int:
        return max(channels // self.cm_reduction, 1)

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, f"model.{key}")

        need(self.n_rrg >= 1, "n_rrg", "must be >= 1")
        need(self.n_mrb >= 1, "n_mrb", "must be >= 1")
        need(self.n_cols >= 1, "n_cols", "must be >= 1")
        need(self.n_streams >= 1, "stream_channels", "need at least one stream")
        need(
            all(a < b for a, b in zip(self.stream_channels, self.stream_channels[1:])),
            "stream_channels",
            "must be strictly increasing toward lower resolutions",
        )
        need(self.groups >= 1, "groups", "must be >= 1")
        need(
            all(c % self.groups == 0 for c in self.stream_channels),
            "groups",
            f"every stream width must be divisible by {self.groups}",
        )
        need(self.in_channels in (3, 6), "in_channels", "must be 3 or 6 (dual-pixel)")
        need(self.out_channels == 3, "out_channels", "must be 3")
        need(self.eps > 0, "eps", "must be positive")
        need(self.activation == "relu", "activation", "only 'relu' is supported")
        need(self.rcb_variant in RCB_VARIANTS, "rcb_variant", f"one of {RCB_VARIANTS}")
        need(self.fusion in FUSIONS, "fusion", f"one of {FUSIONS}")

    def check_input(self, shape: tuple[int, ...]) -> None:
        from .tensor import ShapeError

        if len(shape) != 4 or shape[1] != self.in_channels:
            raise ShapeError(f"expected [N,{self.in_channels},H,W], got {shape}")
        m = self.scale_factor
        if shape[2] % m or shape[3] % m:
            raise ShapeError(f"spatial extents {shape[2]}x{shape[3]} must be multiples of {m}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["stream_channels"] = list(self.stream_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """1 RRG, 1 MRB, streams 8/12/16: the desk-scale verification model."""
        kw = dict(n_rrg=1, n_mrb=1, stream_channels=(8, 12, 16))
        kw.update(overrides)
        return cls(**kw)


DEFAULT_PATCH_SCHEDULE = ((0.0, 128), (0.25, 144), (0.5, 192), (0.75, 224))


@dataclass
class TrainConfig:
    total_iters: int = 300_000
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    patch_schedule: tuple[tuple[float, int], ...] = DEFAULT_PATCH_SCHEDULE
    charbonnier_mode: str = "per_pixel_mean"
    flips: bool = True
    seed: int = 0
    val_every: int = 0  # 0 -> max(total_iters // 20, 1)
    init_branch_gain: float = 0.0  # scale of residual-branch output layers at init

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.patch_schedule = tuple((float(f), int(p)) for f, p in self.patch_schedule)
        self.validate()

    @property
    def validation_interval(self) -> int:
        return self.val_every if self.val_every > 0 else max(self.total_iters // 20, 1)

    def validate(self, scale_factor: int | None = None) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, f"train.{key}")

        need(self.total_iters >= 0, "total_iters", "must be >= 0")
        need(self.lr_init > 0 and self.lr_min > 0, "lr_init", "learning rates must be positive")
        need(self.lr_min <= self.lr_init, "lr_min", "must not exceed lr_init")
        need(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "betas", "two values in [0,1)")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.charbonnier_mode in CHARBONNIER_MODES, "charbonnier_mode", f"one of {CHARBONNIER_MODES}")
        sched = self.patch_schedule
        need(len(sched) >= 1, "patch_schedule", "must not be empty")
        need(sched[0][0] == 0.0, "patch_schedule", "first stage must start at fraction 0")
        need(all(a[0] < b[0] for a, b in zip(sched, sched[1:])), "patch_schedule",
             "start fractions must be strictly increasing")
        need(all(a[1] < b[1] for a, b in zip(sched, sched[1:])), "patch_schedule",
             "patch sizes must be strictly increasing")
        need(all(0 <= f < 1 for f, _ in sched), "patch_schedule", "start fractions must lie in [0,1)")
        if scale_factor is not None:
            need(all(p % scale_factor == 0 for _, p in sched), "patch_schedule",
                 f"patch sizes must be multiples of {scale_factor}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["patch_schedule"] = [list(x) for x in self.patch_schedule]
        return d


@dataclass
class DatasetSpec:
    """Where training/validation pairs come from.

    Real pairs: ``<root>/clean/*.png`` matched to ``<root>/degraded/*.png``
    by file stem. Synthetic pairs: clean images from ``<root>/clean`` (or
    ``procedural`` generated images when no root is given) plus ``synth``.
    """

    root: str | None = None
    task: str = "denoise"
    synth: dict[str, Any] | None = None
    procedural: int = 0
    image_size: int = 64
    val_count: int = 4
    seed: int = 0

    def validate(self, check_paths: bool = True) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"one of {TASKS}", "data.task")
        if self.root is None and not self.procedural:
            raise ConfigError("either data.root or data.procedural must be set", "data.root")
        if self.root is not None and check_paths:
            root = Path(self.root)
            if not (root / "clean").is_dir():
                raise ConfigError(f"{root / 'clean'} does not exist", "data.root")
            if self.synth is None and not (root / "degraded").is_dir():
                raise ConfigError(f"{root / 'degraded'} missing and no synth recipe given", "data.synth")
        if self.root is None and self.synth is None:
            raise ConfigError("procedural images need a synth recipe", "data.synth")
        if self.val_count < 1:
            raise ConfigError("must be >= 1", "data.val_count")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    output_dir: str = "runs/default"
    seed: int = 0


# ---------------------------------------------------------------------------
# text format

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def _parse_schedule(s: str) -> tuple[tuple[float, int], ...]:
    out = []
    for item in s.split(","):
        frac, size = item.strip().split(":")
        out.append((float(frac), int(size)))
    return tuple(out)


def parse_recipe(s: str) -> dict[str, Any]:
    """``"gaussian sigma=25 seed=3"`` -> ``{"kind": "gaussian", "sigma": 25.0, "seed": 3}``."""
    parts = s.split()
    if not parts:
        raise ValueError("empty recipe")
    recipe: dict[str, Any] = {"kind": parts[0]}
    for p in parts[1:]:
        k, v = p.split("=", 1)
        recipe[k] = int(v) if v.lstrip("-").isdigit() else float(v)
    return recipe


def format_recipe(recipe: dict[str, Any]) -> str:
    rest = " ".join(f"{k}={v}" for k, v in recipe.items() if k != "kind")
    return f"{recipe['kind']} {rest}".strip()


def _coerce(target: type, key: str, raw: str):
    if key == "patch_schedule":
        return _parse_schedule(raw)
    if key == "stream_channels":
        return _parse_int_list(raw)
    if key == "betas":
        return tuple(float(p) for p in raw.split(","))
    if key == "synth":
        return parse_recipe(raw)
    if key == "root":
        return raw or None
    if target is bool:
        return _parse_bool(raw)
    if target is int:
        return int(raw)
    if target is float:
        return float(raw)
    return raw


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec}


def _field_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints.get(str(f.type), str) for f in dataclasses.fields(cls)}


def parse_run_config(text: str, check_paths: bool = True, require_data: bool = True,
                     base_dir: str | Path | None = None) -> RunConfig:
    """Parse the dotted key-value format.

    ``run.seed`` overrides ``train.seed``. Relative ``data.root`` paths are
    resolved against ``base_dir`` when given. With ``require_data=False`` a
    file without any ``data.*`` keys is accepted (model-only configs).
    """
    values: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    run: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", line)
        key, raw = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section == "run":
            if name not in ("output_dir", "seed"):
                raise ConfigError("unknown key", key)
            try:
                run[name] = int(raw) if name == "seed" else raw
            except ValueError as exc:
                raise ConfigError(str(exc), key) from None
            continue
        if section not in _SECTIONS:
            raise ConfigError("unknown section", key)
        types = _field_types(_SECTIONS[section])
        if name not in types:
            raise ConfigError("unknown key", key)
        try:
            values[section][name] = _coerce(types[name], name, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value {raw!r} ({exc})", key) from None

    model = ModelConfig(**values["model"])
    train = TrainConfig(**values["train"])
    train.validate(model.scale_factor)
    if "seed" in run:
        train.seed = run["seed"]
    run["seed"] = train.seed
    data = DatasetSpec(**values["data"])
    if data.root is not None and base_dir is not None and not Path(data.root).is_absolute():
        data.root = str(Path(base_dir) / data.root)
    if require_data or values["data"]:
        data.validate(check_paths=check_paths)
    return RunConfig(model=model, train=train, data=data, **run)


def load_run_config(path: str | Path, check_paths: bool = True, require_data: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config ({exc.strerror})", str(path)) from None
    return parse_run_config(text, check_paths, require_data, base_dir=path.parent)


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("train", cfg.train), ("data", cfg.data)):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            if f.name == "patch_schedule":
                v = ", ".join(f"{a:g}:{b}" for a, b in v)
            elif f.name == "synth":
                v = format_recipe(v)
            elif isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{section}.{f.name} = {v}")
    lines.append(f"run.output_dir = {cfg.output_dir}")
    lines.append(f"run.seed = {cfg.seed}")
    return "\n".join(lines) + "\n"
