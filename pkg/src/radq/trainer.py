"""Training loop: AdamW with decoupled weight decay, gradient clipping,
seed-deterministic shuffling, and byte-deterministic checkpoints.

Shuffling is stateless: epoch e uses a permutation derived from (seed, e),
so resuming from a checkpoint only needs the step counter to reproduce the
uninterrupted trajectory exactly.
"""

import dataclasses
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import metrics as M
from .errors import ConfigError, DataError, FormatError, NumericError
from .model import ModelConfig, RadarDetector
from .raddata import SceneSpec, load_dataset
from .tensor import GradTape, Tensor

CKPT_MAGIC = b"RQCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    # data
    train_data: str = ""
    val_data: str = ""
    cube_range: int = 64
    cube_azimuth: int = 64
    cube_doppler: int = 16
    # model
    d_model: int = 32
    heads: int = 4
    layers: int = 3
    num_queries: int = 10
    num_classes: int = 6
    tpe_alpha: float = 0.6
    d_pos: int = 0
    ffn_hidden: int = 64
    backbone_strides: tuple = (8, 2, 2)
    backbone_channels: tuple = (24, 32, 48)
    # optimization
    epochs: int = 250
    max_steps: int = 500  # 0 disables the cap
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    # loss
    loss_weights: tuple = (40.0, 15.0, 15.0, 10.0, 5.0, 5.0)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # evaluation cadence (epochs; 0 = only after training)
    eval_every: int = 0
    score_floor: float = 0.05

    def __post_init__(self):
        for name in ("cube_range", "cube_azimuth", "cube_doppler", "d_model", "heads",
                     "layers", "num_queries", "num_classes", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "max_steps", "learning_rate", "weight_decay", "grad_clip",
                     "focal_gamma", "score_floor", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if len(self.loss_weights) != 6:
            raise ConfigError("loss_weights needs 6 entries")

    def model_config(self):
        return ModelConfig(
            d_model=self.d_model,
            heads=self.heads,
            layers=self.layers,
            num_queries=self.num_queries,
            num_classes=self.num_classes,
            tpe_alpha=self.tpe_alpha,
            d_pos=self.d_pos,
            ffn_hidden=self.ffn_hidden,
            backbone_strides=tuple(self.backbone_strides),
            backbone_channels=tuple(self.backbone_channels),
        )

    def loss_weight_obj(self):
        b1, b2, b3, b4, bg, bl = self.loss_weights
        return L.LossWeights(b1, b2, b3, b4, bg, bl)

    def focal_obj(self):
        return L.default_focal_params(self.num_classes, self.focal_gamma, self.focal_alpha)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _parse_value(text, default):
    if isinstance(default, bool):
        raise ConfigError("boolean fields are unsupported")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if text.strip() == "":
            return ()
        element = default[0] if default else 0.0
        cast = int if isinstance(element, int) else float
        return tuple(cast(part.strip()) for part in text.split(","))
    return text


def parse_config_text(text):
    """Flat ``key = value`` lines; '#' comments allowed; unknown keys rejected."""
    fields = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(value.strip(), fields[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_hash(cfg):
    return hashlib.sha256(cfg.to_text().encode()).hexdigest()


def scene_spec_from_config(cfg, classes=(0, 1, 2), count_range=(1, 3), noise_floor=0.05):
    return SceneSpec(
        dims=(cfg.cube_range, cfg.cube_azimuth, cfg.cube_doppler),
        count_range=count_range,
        noise_floor=noise_floor,
        classes=classes,
    )


CLS_HEAD_LR_SCALE = {"heads.cls": 10.0}


def build_model(cfg):
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    return RadarDetector(cfg.model_config(), cfg.cube_doppler, rng)


def build_optimizer(model, cfg):
    return AdamW(model.parameters(), cfg.learning_rate, cfg.weight_decay,
                 lr_scales=CLS_HEAD_LR_SCALE)


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay.

    ``lr_scales`` maps parameter-name prefixes to per-group learning-rate
    multipliers (the classification head trains faster than the trunk).
    """

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8,
                 lr_scales=None):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.scale = {k: 1.0 for k in self.params}
        for prefix, factor in (lr_scales or {}).items():
            for k in self.params:
                if k.startswith(prefix):
                    self.scale[k] = factor

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            lr = self.lr * self.scale[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1**self.t)
            v_hat = self.v[name] / (1.0 - b2**self.t)
            p.data = (
                p.data
                - lr * m_hat / (np.sqrt(v_hat) + self.eps)
                - lr * self.weight_decay * p.data
            )


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_step(model, frames, optimizer, weights, focal, grad_clip=1.0):
    """One optimizer update over a batch of frames; returns the loss breakdown."""
    if not frames:
        raise DataError("empty batch")
    optimizer.zero_grad()
    skipped = []
    frame_losses = []
    agg = {"bbox_rad": 0.0, "bbox_ra": 0.0, "bbox_rd": 0.0, "class": 0.0}
    with GradTape() as tape:
        for idx, frame in enumerate(frames):
            try:
                out = model(frame.cube.bins)
                loss, terms, _ = L.total_loss(out, frame.objects, weights, focal)
            except DataError as exc:
                skipped.append((idx, str(exc)))
                continue
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss on batch frame {idx}: {terms}")
            frame_losses.append(loss)
            for key in agg:
                agg[key] += terms[key]
        if not frame_losses:
            raise DataError(f"every frame in the batch was skipped: {skipped}")
        batch_loss = frame_losses[0]
        for extra in frame_losses[1:]:
            batch_loss = batch_loss + extra
        batch_loss = batch_loss * (1.0 / len(frame_losses))
    tape.backward(batch_loss)
    grad_norm = clip_gradients(optimizer.params, grad_clip)
    optimizer.step()
    n = len(frame_losses)
    stats = {key: value / n for key, value in agg.items()}
    stats["loss"] = float(batch_loss.data)
    stats["grad_norm"] = grad_norm
    stats["skipped"] = len(skipped)
    return stats


# -- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    config_text: str
    params: dict
    adam_m: dict
    adam_v: dict

    @property
    def config(self):
        return parse_config_text(self.config_text)

    @property
    def hash(self):
        return hashlib.sha256(self.config_text.encode()).hexdigest()


def _pack_section(arrays):
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    config_bytes = ckpt.config_text.encode()
    digest = hashlib.sha256(config_bytes).digest()
    blob = [
        CKPT_MAGIC,
        struct.pack("<IQ", CKPT_VERSION, ckpt.step),
        digest,
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        _pack_section(ckpt.params),
        _pack_section(ckpt.adam_m),
        _pack_section(ckpt.adam_v),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.blob):
            raise FormatError("truncated checkpoint", self.offset)
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def _read_section(reader):
    (count,) = reader.unpack("<I")
    out = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n_values = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * n_values), dtype="<f8").reshape(shape).copy()
        out[name] = data
    return out


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, step = reader.unpack("<IQ")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    digest = reader.take(32)
    (config_len,) = reader.unpack("<I")
    config_text = reader.take(config_len).decode()
    if hashlib.sha256(config_text.encode()).digest() != digest:
        raise FormatError("config hash mismatch", 16)
    params = _read_section(reader)
    adam_m = _read_section(reader)
    adam_v = _read_section(reader)
    if reader.offset != len(blob):
        raise FormatError("trailing bytes in checkpoint", reader.offset)
    return Checkpoint(step, config_text, params, adam_m, adam_v)


def snapshot(model, optimizer, cfg, step):
    return Checkpoint(
        step=step,
        config_text=cfg.to_text(),
        params={k: p.data.copy() for k, p in model.parameters().items()},
        adam_m={k: v.copy() for k, v in optimizer.m.items()},
        adam_v={k: v.copy() for k, v in optimizer.v.items()},
    )


def restore(model, optimizer, ckpt):
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise DataError("checkpoint parameter names do not match the model")
    for name, p in params.items():
        if p.data.shape != ckpt.params[name].shape:
            raise DataError(f"shape mismatch for {name}")
        p.data = ckpt.params[name].copy()
    optimizer.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
    optimizer.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
    optimizer.t = ckpt.step


def load_model(ckpt):
    """Rebuild the detector a checkpoint was trained with."""
    cfg = ckpt.config
    model = build_model(cfg)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise DataError("checkpoint parameter names do not match the model")
    for name, p in params.items():
        p.data = ckpt.params[name].copy()
    return model, cfg


# -- the loop ------------------------------------------------------------


def _epoch_permutation(seed, epoch, n):
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, 2, epoch])))
    return rng.permutation(n)


def _validate_frames(frames, cfg):
    dims = (cfg.cube_range, cfg.cube_azimuth, cfg.cube_doppler)
    for i, frame in enumerate(frames):
        if frame.cube.dims != dims:
            raise DataError(
                f"frame {i} has cube dims {frame.cube.dims}, config expects {dims}"
            )


def evaluate_model(model, frames, view="rad", score_floor=M.DEFAULT_SCORE_FLOOR):
    """Run inference over frames and score mAP for one view."""
    cfg = M.EvalConfig(
        M.THRESHOLDS_3D if view == "rad" else M.THRESHOLDS_2D, view, score_floor
    )
    frame_dets, frame_gts = [], []
    for frame in frames:
        out = model(frame.cube.bins)
        dets = M.extract_detections(
            out.final_logits.data, out.final_boxes.data, score_floor
        )
        frame_dets.append(dets)
        frame_gts.append(frame.objects)
    return M.mean_average_precision(frame_dets, frame_gts, cfg)


def run_training(cfg, out_dir=None, resume_path=None, log_fn=None):
    """Full deterministic run; returns (final Checkpoint, per-step history)."""
    frames = load_dataset(cfg.train_data)
    _validate_frames(frames, cfg)
    val_frames = None
    if cfg.val_data:
        val_frames = load_dataset(cfg.val_data)
        _validate_frames(val_frames, cfg)

    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    start_step = 0
    if resume_path is not None:
        ckpt = load_checkpoint(resume_path)
        if ckpt.hash != config_hash(cfg):
            raise ConfigError("resume checkpoint was produced by a different config")
        restore(model, optimizer, ckpt)
        start_step = ckpt.step

    weights = cfg.loss_weight_obj()
    focal = cfg.focal_obj()
    n = len(frames)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history = []
    step = start_step
    start_epoch = start_step // steps_per_epoch
    done = False
    for epoch in range(start_epoch, cfg.epochs):
        order = _epoch_permutation(cfg.seed, epoch, n)
        for b in range(steps_per_epoch):
            global_index = epoch * steps_per_epoch + b
            if global_index < start_step:
                continue  # replayed position when resuming
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
            batch = [frames[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            stats = train_step(model, batch, optimizer, weights, focal, cfg.grad_clip)
            step += 1
            entry = {"step": step, "epoch": epoch, **stats}
            history.append(entry)
            if log_fn is not None:
                log_fn(entry)
        if done:
            break
        if cfg.eval_every and val_frames and (epoch + 1) % cfg.eval_every == 0:
            result = evaluate_model(model, val_frames, "rad", cfg.score_floor)
            history.append({"step": step, "epoch": epoch, "val_map_rad": result.mean_ap})

    ckpt = snapshot(model, optimizer, cfg, step)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(ckpt, os.path.join(out_dir, "checkpoint.ckpt"))
        with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
            fh.write(cfg.to_text())
        with open(os.path.join(out_dir, "train_log.txt"), "w") as fh:
            for entry in history:
                fh.write(" ".join(f"{k}={v}" for k, v in entry.items()) + "\n")
        if val_frames:
            result = evaluate_model(model, val_frames, "rad", cfg.score_floor)
            M.write_report(
                result,
                os.path.join(out_dir, "val_metrics_rad.txt"),
                os.path.join(out_dir, "val_metrics_rad.csv"),
            )
    return ckpt, history
