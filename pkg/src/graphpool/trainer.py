"""Training loop: one-cycle learning rate, Adam, speaker-balanced
batches, and bit-exact checkpoint/resume.

Each epoch visits every training utterance once, in an order that
interleaves speakers round-robin so batches stay speaker-diverse.
Utterances longer than the crop window get a random contiguous crop;
shorter ones are tiled (repeat-padded) up to the window.  Gradients
accumulate item by item on a fresh tape, scaled by 1/batch, so memory
stays bounded by one utterance graph.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .dataio import FeatureStack, Manifest, load_tensors, read_feature_stack, save_tensors
from .diffcore import Tape, Value, parameter, scale
from .errors import FormatError, NumericError, UsageError
from .loss import AamHead, aam_loss, init_aam_head
from .model import ModelConfig, ModelParams

_ACTIVATION_CODES = {"relu": 0, "gelu": 1, "sigmoid": 2}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_DTYPE_NAMES = {0: np.float64, 1: np.float32}


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 48
    crop_frames: int = 149
    max_lr: float = 1e-3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    warmup_fraction: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_frames < 1:
            raise UsageError(f"crop_frames must be >= 1, got {self.crop_frames}")
        if self.max_lr <= 0:
            raise UsageError(f"max_lr must be positive, got {self.max_lr}")
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise UsageError("div_factor and final_div_factor must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise UsageError(
                f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise UsageError("betas must lie in [0, 1)")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """One-cycle schedule: cosine rise from max_lr/div_factor to max_lr
    over the warmup fraction, cosine decay to max_lr/final_div_factor
    over the remainder.  `step` is 0-based and must be < total_steps."""
    if total_steps < 1:
        raise UsageError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside schedule [0, {total_steps})")
    initial = config.max_lr / config.div_factor
    final = config.max_lr / config.final_div_factor
    warm = config.warmup_fraction * total_steps
    if step < warm:
        p = step / warm
        return initial + (config.max_lr - initial) * (1.0 - np.cos(np.pi * p)) / 2.0
    span = total_steps - warm
    p = (step - warm) / span if span > 0 else 1.0
    return final + (config.max_lr - final) * (1.0 + np.cos(np.pi * p)) / 2.0


class Adam:
    """Adam with bias correction; moments kept in float64 regardless of
    parameter dtype."""

    def __init__(self, params: dict[str, Value], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(v.data.shape) for k, v in self.params.items()}
        self.v = {k: np.zeros(v.data.shape) for k, v in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = np.asarray(p.grad, dtype=np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


def grad_norm(params: dict[str, Value]) -> float:
    total = 0.0
    for p in params.values():
        g = np.asarray(p.grad, dtype=np.float64)
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def epoch_order(manifest: Manifest, rng: np.random.Generator) -> list[str]:
    """Shuffle within speaker, shuffle speaker order, then deal one
    utterance per speaker round-robin so consecutive items mix speakers."""
    queues: dict[str, list[str]] = {}
    for entry in sorted(manifest.entries, key=lambda e: e.utt):
        queues.setdefault(entry.speaker, []).append(entry.utt)
    speakers = sorted(queues)
    for spk in speakers:
        ids = queues[spk]
        queues[spk] = [ids[i] for i in rng.permutation(len(ids))]
    speakers = [speakers[i] for i in rng.permutation(len(speakers))]
    order: list[str] = []
    cursor = 0
    while queues:
        spk = speakers[cursor % len(speakers)]
        order.append(queues[spk].pop())
        if not queues[spk]:
            del queues[spk]
            speakers.remove(spk)
            cursor -= 1  # list shrank before the cursor advances
        cursor += 1
    return order


def crop_frames_window(values: np.ndarray, crop: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop along the frame axis; short inputs are
    tiled until they cover the window."""
    n = values.shape[1]
    if n >= crop:
        start = int(rng.integers(0, n - crop + 1))
        return values[:, start:start + crop, :]
    reps = -(-crop // n)
    return np.tile(values, (1, reps, 1))[:, :crop, :]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def _rng_state_to_row(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise UsageError(f"unsupported bit generator {st['bit_generator']!r}")
    limbs = []
    for key in ("state", "inc"):
        x = st["state"][key]
        limbs.extend((x >> (32 * k)) & 0xFFFFFFFF for k in range(4))
    limbs.append(st["has_uint32"])
    limbs.append(st["uinteger"])
    return np.array([limbs], dtype=np.float64)


def _rng_state_from_row(row: np.ndarray) -> np.random.Generator:
    vals = [int(x) for x in np.asarray(row).ravel()]
    if len(vals) != 10:
        raise FormatError(f"rng state row must have 10 values, got {len(vals)}")
    state = sum(vals[k] << (32 * k) for k in range(4))
    inc = sum(vals[4 + k] << (32 * k) for k in range(4))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": vals[8],
        "uinteger": vals[9],
    }
    return rng


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    head: AamHead
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_t: int
    step: int
    epoch: int
    rng_row: np.ndarray
    dtype: np.dtype


def _scalar(x: float) -> np.ndarray:
    return np.array([[float(x)]])


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    cfg = ckpt.model_config
    tensors: dict[str, np.ndarray] = {}
    named = mdl.named_parameters(ckpt.params)
    named["aam/class_rows"] = ckpt.head.class_rows
    for name, value in named.items():
        tensors[name] = np.asarray(value.data, dtype=np.float64)
    for name, arr in ckpt.opt_m.items():
        tensors[f"opt/m/{name}"] = arr
    for name, arr in ckpt.opt_v.items():
        tensors[f"opt/v/{name}"] = arr
    tensors["meta/opt_t"] = _scalar(ckpt.opt_t)
    tensors["meta/step"] = _scalar(ckpt.step)
    tensors["meta/epoch"] = _scalar(ckpt.epoch)
    tensors["meta/rng"] = ckpt.rng_row
    tensors["meta/feature_dim"] = _scalar(cfg.feature_dim)
    tensors["meta/projected_dim"] = _scalar(
        -1 if cfg.projected_dim is None else cfg.projected_dim)
    tensors["meta/rounds"] = _scalar(cfg.rounds)
    tensors["meta/mlp_hidden"] = _scalar(cfg.mlp_hidden)
    tensors["meta/activation"] = _scalar(_ACTIVATION_CODES[cfg.activation])
    tensors["meta/use_layer_weighting"] = _scalar(int(cfg.use_layer_weighting))
    tensors["meta/thin"] = _scalar(int(cfg.thin))
    tensors["meta/n_layers"] = _scalar(cfg.n_layers)
    tensors["meta/aam_margin"] = _scalar(ckpt.head.margin)
    tensors["meta/aam_scale"] = _scalar(ckpt.head.scale)
    tensors["meta/dtype"] = _scalar(_DTYPE_CODES[np.dtype(ckpt.dtype)])
    save_tensors(tensors, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    tensors = load_tensors(path)

    def meta(name: str) -> float:
        if name not in tensors:
            raise FormatError(f"checkpoint missing {name!r}")
        return float(tensors[name][0, 0])

    dtype = np.dtype(_DTYPE_NAMES[int(meta("meta/dtype"))])
    projected = int(meta("meta/projected_dim"))
    cfg = ModelConfig(
        feature_dim=int(meta("meta/feature_dim")),
        projected_dim=None if projected < 0 else projected,
        rounds=int(meta("meta/rounds")),
        mlp_hidden=int(meta("meta/mlp_hidden")),
        activation=_ACTIVATION_NAMES[int(meta("meta/activation"))],
        use_layer_weighting=bool(int(meta("meta/use_layer_weighting"))),
        thin=bool(int(meta("meta/thin"))),
        n_layers=int(meta("meta/n_layers")),
    )
    params = mdl.init_params(cfg, seed=0, dtype=dtype)
    named = mdl.named_parameters(params)
    for name, value in named.items():
        if name not in tensors:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        stored = tensors[name]
        if stored.shape != value.data.shape:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {stored.shape}, "
                f"expected {value.data.shape}")
        value.data = stored.astype(dtype)
        value.grad = np.zeros_like(value.data)
    if "aam/class_rows" not in tensors:
        raise FormatError("checkpoint missing 'aam/class_rows'")
    head = AamHead(
        class_rows=parameter(tensors["aam/class_rows"].astype(dtype),
                             name="aam/class_rows"),
        margin=meta("meta/aam_margin"),
        scale=meta("meta/aam_scale"),
    )
    opt_names = list(named) + ["aam/class_rows"]
    opt_m = {n: tensors[f"opt/m/{n}"] for n in opt_names if f"opt/m/{n}" in tensors}
    opt_v = {n: tensors[f"opt/v/{n}"] for n in opt_names if f"opt/v/{n}" in tensors}
    return Checkpoint(
        model_config=cfg,
        params=params,
        head=head,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_t=int(meta("meta/opt_t")),
        step=int(meta("meta/step")),
        epoch=int(meta("meta/epoch")),
        rng_row=tensors["meta/rng"],
        dtype=dtype,
    )


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: str
    epoch_checkpoints: list[str]
    metrics_path: str
    steps: int
    last_loss: float


def total_steps_for(manifest: Manifest, config: TrainConfig) -> int:
    n = len(manifest.entries)
    if n == 0:
        raise UsageError("manifest has no utterances to train on")
    per_epoch = -(-n // config.batch_size)
    return per_epoch * config.epochs


def train(manifest: Manifest, model_config: ModelConfig, config: TrainConfig,
          out_dir: str | os.PathLike, resume_from: str | os.PathLike | None = None,
          dtype=np.float64, log=None) -> TrainResult:
    """Run (or resume) the full training schedule, writing per-epoch
    checkpoints, a final checkpoint, and a step metrics CSV to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    class_map = manifest.class_map()
    if len(class_map) < 2:
        raise UsageError(
            f"training needs at least 2 speakers, manifest has {len(class_map)}")
    by_id = manifest.by_id()
    total = total_steps_for(manifest, config)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model_config = ckpt.model_config
        params, head, dtype = ckpt.params, ckpt.head, ckpt.dtype
        named = mdl.named_parameters(params)
        named["aam/class_rows"] = head.class_rows
        opt = Adam(named, config.beta1, config.beta2, config.eps)
        for n in named:
            if n in ckpt.opt_m:
                opt.m[n] = ckpt.opt_m[n]
                opt.v[n] = ckpt.opt_v[n]
        opt.t = ckpt.opt_t
        rng = _rng_state_from_row(ckpt.rng_row)
        global_step, start_epoch = ckpt.step, ckpt.epoch
        if head.n_classes != len(class_map):
            raise UsageError(
                f"checkpoint has {head.n_classes} classes, manifest has {len(class_map)}")
    else:
        params = mdl.init_params(model_config, seed=config.seed, dtype=dtype)
        dim = model_config.resolved_projected_dim
        head = init_aam_head(len(class_map), dim, margin=config.aam_margin,
                             scale=config.aam_scale, seed=config.seed + 1,
                             dtype=dtype)
        named = mdl.named_parameters(params)
        named["aam/class_rows"] = head.class_rows
        opt = Adam(named, config.beta1, config.beta2, config.eps)
        rng = np.random.default_rng(config.seed + 2)
        global_step, start_epoch = 0, 0

    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if resume_from is not None and os.path.exists(metrics_path) else "w"
    epoch_paths: list[str] = []
    last_loss = float("nan")
    with open(metrics_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "lr", "loss", "grad_norm"])
        for epoch in range(start_epoch, config.epochs):
            order = epoch_order(manifest, rng)
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo:lo + config.batch_size]
                lr = lr_at(global_step, total, config)
                opt.zero_grad()
                batch_loss = 0.0
                for utt in batch:
                    entry = by_id[utt]
                    stack = read_feature_stack(entry.path)
                    stack = FeatureStack(
                        crop_frames_window(stack.values, config.crop_frames, rng))
                    with Tape() as tape:
                        embedding = mdl.forward(stack, params, model_config)
                        item_loss = aam_loss(embedding, class_map[entry.speaker], head)
                        scaled = item_loss
                        if len(batch) > 1:
                            scaled = scale(item_loss, 1.0 / len(batch))
                        tape.backward(scaled)
                    batch_loss += float(item_loss.item())
                batch_loss /= len(batch)
                if not np.isfinite(batch_loss):
                    raise NumericError(
                        f"non-finite loss {batch_loss} at step {global_step} "
                        f"(utterances: {', '.join(batch)})")
                gnorm = grad_norm(opt.params)
                opt.step(lr)
                writer.writerow([global_step, f"{lr:.10g}",
                                 f"{batch_loss:.10g}", f"{gnorm:.10g}"])
                global_step += 1
                last_loss = batch_loss
                if log is not None:
                    log(f"step {global_step}/{total} lr {lr:.3e} "
                        f"loss {batch_loss:.4f} grad_norm {gnorm:.3e}")
            fh.flush()
            ckpt = Checkpoint(
                model_config=model_config, params=params, head=head,
                opt_m=opt.m, opt_v=opt.v, opt_t=opt.t,
                step=global_step, epoch=epoch + 1,
                rng_row=_rng_state_to_row(rng), dtype=np.dtype(dtype))
            epoch_path = os.path.join(out_dir, f"epoch_{epoch + 1:04d}.gpck")
            save_checkpoint(ckpt, epoch_path)
            epoch_paths.append(epoch_path)
    if start_epoch >= config.epochs:  # resumed from an already-finished run
        ckpt = Checkpoint(
            model_config=model_config, params=params, head=head,
            opt_m=opt.m, opt_v=opt.v, opt_t=opt.t,
            step=global_step, epoch=start_epoch,
            rng_row=_rng_state_to_row(rng), dtype=np.dtype(dtype))
    final_path = os.path.join(out_dir, "final.gpck")
    save_checkpoint(ckpt, final_path)
    return TrainResult(
        final_checkpoint=final_path,
        epoch_checkpoints=epoch_paths,
        metrics_path=metrics_path,
        steps=global_step,
        last_loss=last_loss,
    )
