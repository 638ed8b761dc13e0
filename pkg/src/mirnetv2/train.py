"""Charbonnier loss, Adam, schedules and the training loop.

Metrics log format (tab-separated, one header line, then one row per
iteration, appended as training runs)::

    iter    lr    patch    loss    val_psnr

``iter`` is the 0-based step index, ``lr`` and ``loss`` use ``repr`` floats
so they round-trip exactly, ``val_psnr`` is empty except on validation steps.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .blocks import ParamStore, init_params, model_forward
from .config import ModelConfig, TrainConfig
from .data import ImagePair, PairedDataset, crop_to, pad_to_multiple
from .formats import load_checkpoint, save_checkpoint
from .metrics import psnr
from .tensor import FLOAT32, ShapeError, Tape, Tensor, add, is_sequential, mean, mul, sqrt, sub, total

LOG_COLUMNS = ("iter", "lr", "patch", "loss", "val_psnr")


class NonFiniteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss

def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3, mode: str = "per_pixel_mean") -> Tensor:
    """mean(sqrt(d^2 + eps^2)) or, with ``mode="global_norm"``, sqrt(||d||^2 + eps^2)."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    sq = mul(d, d)
    e2 = eps * eps
    if mode == "per_pixel_mean":
        return mean(sqrt(add(sq, e2)))
    if mode == "global_norm":
        return sqrt(add(total(sq), e2))
    raise ValueError(f"unknown charbonnier mode {mode!r}")


# ---------------------------------------------------------------------------
# schedules

def cosine_lr(t: int, cfg: TrainConfig) -> float:
    T = cfg.total_iters
    if not 0 <= t <= T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    if t == 0:
        return cfg.lr_init
    if t == T:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * t / T))


def progressive_patch(t: int, cfg: TrainConfig) -> int:
    size = cfg.patch_schedule[0][1]
    for frac, ps in cfg.patch_schedule:
        if frac * cfg.total_iters <= t:
            size = ps
    return size


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class TrainState:
    iter: int = 0
    lr: float = 0.0
    patch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, store: ParamStore, seed: int = 0) -> "TrainState":
        m = {k: np.zeros_like(t.data) for k, t in store.items()}
        v = {k: np.zeros_like(t.data) for k, t in store.items()}
        return cls(m=m, v=v, rng=np.random.default_rng(seed))

    def to_meta(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"iter": self.iter, "lr": self.lr, "patch": self.patch,
                "rng": self.rng.bit_generator.state}
        extra = {f"adam.m/{k}": a for k, a in self.m.items()}
        extra.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return meta, extra

    @classmethod
    def from_meta(cls, meta: dict, extra: dict[str, np.ndarray]) -> "TrainState":
        rng = np.random.default_rng()
        if "rng" in meta:
            rng.bit_generator.state = meta["rng"]
        m = {k[len("adam.m/"):]: a for k, a in extra.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a for k, a in extra.items() if k.startswith("adam.v/")}
        return cls(meta.get("iter", 0), meta.get("lr", 0.0), meta.get("patch", 0), m, v, rng)


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], state: TrainState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``store`` and ``state``.

    Raises NonFiniteError before touching anything if a gradient is not finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.iter}")
        if g.shape != store[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {store[name].shape}")
    b1, b2 = betas
    t = state.iter + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = store[name]
        dt = p.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        p.data = p.data - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
    state.iter = t
    state.lr = lr


def named_grads(store: ParamStore, leaf_grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient map keyed by parameter name; untouched parameters get zeros."""
    return {name: leaf_grads.get(t, np.zeros_like(t.data)) for name, t in store.items()}


def loss_and_grads(store: ParamStore, cfg: ModelConfig, x: Tensor, y: Tensor,
                   mode: str = "per_pixel_mean") -> tuple[float, dict[str, np.ndarray]]:
    store.set_requires_grad(True)
    with Tape() as tape:
        loss = charbonnier_loss(model_forward(x, store, cfg), y, cfg.eps, mode)
        leaf = tape.backward(loss)
    return loss.item(), named_grads(store, leaf)


# ---------------------------------------------------------------------------
# inference helpers

def restore(image: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """model_forward with reflect padding to the scale multiple and crop-back."""
    padded, extents = pad_to_multiple(image, cfg.scale_factor)
    dt = store["head.weight"].dtype
    out = model_forward(Tensor(padded.data.astype(dt, copy=False)), store, cfg)
    return crop_to(out, extents)


def validate_psnr(store: ParamStore, cfg: ModelConfig, pairs: list[ImagePair]) -> float:
    """Mean per-image PSNR of clipped restorations against the clean images."""
    vals = []
    for p in pairs:
        out = np.clip(restore(p.degraded, store, cfg).data, 0.0, 1.0)
        vals.append(psnr(out, p.clean.data))
    return float(np.mean(vals))


def input_psnr(pairs: list[ImagePair]) -> float:
    """Mean PSNR of the degraded inputs (first view for dual-pixel)."""
    return float(np.mean([psnr(p.degraded.data[:, :3], p.clean.data) for p in pairs]))


# ---------------------------------------------------------------------------
# batches

def _batches(dataset: PairedDataset, cfg: TrainConfig, rng: np.random.Generator, dtype,
             start: int = 0) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield (patch, degraded, clean) batches; epochs are reshuffled."""
    order: list[int] = []
    for t in range(start, cfg.total_iters):
        ps = progressive_patch(t, cfg)
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            pair = dataset.draw(int(order.pop()), ps, rng, cfg.flips)
            xs.append(pair.degraded.data)
            ys.append(pair.clean.data)
        yield ps, np.concatenate(xs).astype(dtype), np.concatenate(ys).astype(dtype)


def _threaded(gen: Iterator, depth: int = 2) -> Iterator:
    """Run ``gen`` in a producer thread; output order is unchanged."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in gen:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    params: ParamStore
    state: TrainState
    log: list[dict]
    wall_time: float
    val_psnr: float | None
    input_psnr: float | None


def format_log_row(row: dict) -> str:
    vp = row.get("val_psnr")
    vs = "" if vp is None else repr(float(vp))
    return f"{row['iter']}\t{row['lr']!r}\t{row['patch']}\t{row['loss']!r}\t{vs}"


def parse_metrics_log(text: str) -> list[dict]:
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split("\t")) != LOG_COLUMNS:
        raise ValueError("missing metrics log header")
    rows = []
    for line in lines[1:]:
        it, lr, ps, loss, vp = line.split("\t")
        rows.append({"iter": int(it), "lr": float(lr), "patch": int(ps), "loss": float(loss),
                     "val_psnr": float(vp) if vp else None})
    return rows


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: PairedDataset,
               output_dir: str | Path | None = None, params: ParamStore | None = None,
               dtype=FLOAT32, verbose: bool = False) -> TrainResult:
    """Train with Adam on the Charbonnier loss under the cosine/patch schedules.

    Seeds: parameters from ``train_cfg.seed``, batch sampling from a child
    seed. With an ``output_dir`` writes ``metrics.tsv``, ``checkpoint.erck``
    and ``summary.json`` (wall time lives only in the summary so logs and
    checkpoints stay comparable across runs).
    """
    train_cfg.validate(model_cfg.scale_factor)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    seed_params, seed_data = np.random.SeedSequence(train_cfg.seed).spawn(2)
    if params is None:
        params = init_params(model_cfg, int(seed_params.generate_state(1)[0]), dtype,
                             branch_gain=train_cfg.init_branch_gain)
    else:
        params = params.astype(dtype)
    state = TrainState.fresh(params, 0)
    state.rng = np.random.default_rng(seed_data)
    val_pairs = [ImagePair(Tensor(p.degraded.data.astype(dtype)), Tensor(p.clean.data.astype(dtype)), p.name)
                 for p in dataset.val]

    out = Path(output_dir) if output_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "metrics.tsv", "w")
        log_f.write("\t".join(LOG_COLUMNS) + "\n")

    log: list[dict] = []
    interval = train_cfg.validation_interval
    last_val = None
    base_psnr = input_psnr(val_pairs) if val_pairs else None
    t0 = time.perf_counter()
    batches = _batches(dataset, train_cfg, state.rng, dtype)
    if not is_sequential():
        batches = _threaded(batches)
    try:
        for t, (ps, x, y) in enumerate(batches):
            lr = cosine_lr(t, train_cfg)
            try:
                loss, grads = loss_and_grads(params, model_cfg, Tensor(x), Tensor(y), train_cfg.charbonnier_mode)
            except FloatingPointError as exc:
                raise NonFiniteError(f"{exc} at iteration {t} (patch {ps}, lr {lr:.3g})") from exc
            if not math.isfinite(loss):
                raise NonFiniteError(f"loss became {loss} at iteration {t} (patch {ps}, lr {lr:.3g})")
            adam_step(params, grads, state, lr, train_cfg.betas, train_cfg.adam_eps)
            state.patch = ps
            row = {"iter": t, "lr": lr, "patch": ps, "loss": loss, "val_psnr": None}
            if val_pairs and ((t + 1) % interval == 0 or t + 1 == train_cfg.total_iters):
                last_val = row["val_psnr"] = validate_psnr(params, model_cfg, val_pairs)
                if verbose:
                    print(f"iter {t + 1}: loss {loss:.5f}  val PSNR {last_val:.2f} dB (input {base_psnr:.2f})")
            log.append(row)
            if log_f is not None:
                log_f.write(format_log_row(row) + "\n")
                log_f.flush()
    finally:
        if log_f is not None:
            log_f.close()
    wall = time.perf_counter() - t0
    if last_val is None and val_pairs:
        last_val = validate_psnr(params, model_cfg, val_pairs)

    if out is not None:
        meta, extra = state.to_meta()
        meta["seed"] = train_cfg.seed
        meta["train_config"] = train_cfg.to_dict()
        save_checkpoint(out / "checkpoint.erck", model_cfg, params, meta, extra)
        summary = {"iterations": train_cfg.total_iters, "wall_time_s": wall,
                   "val_psnr": last_val, "input_psnr": base_psnr}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return TrainResult(params, state, log, wall, last_val, base_psnr)


def load_trained(path: str | Path) -> tuple[ModelConfig, ParamStore, TrainState]:
    cfg, store, meta, extra = load_checkpoint(path)
    return cfg, store, TrainState.from_meta(meta, extra)
