"""Training loop, learning-rate schedule and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    b"LPGN" | u32 version | u32 header length | UTF-8 JSON header | payload

The header lists every tensor's name, shape and dtype in payload order,
plus the model and training configuration and a CRC-32 of the payload.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_nn as nn
from .manifest import VisitSequence, resolve
from .model import Model, ModelConfig, interval_scales
from .ppm import read_ppm
from .preprocess import PreprocessConfig, RawImage, preprocess


class TrainConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    timepoints: int = 3
    interval_scaling: bool = True
    lr: float = 1e-4
    plateau_patience: int = 10
    lr_factor: float = 2.0 / 3.0
    early_stop_patience: int = 25
    min_delta: float = 1e-6
    max_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    # 1.0 is plain BCE; "balanced" uses n_negative / n_positive of the training split
    pos_weight: float | str = 1.0
    cam_head: bool = False
    hidden: int = 1
    features: int = 64
    channels: tuple[int, ...] = (8, 16)
    image_size: int = 64

    def __post_init__(self):
        if self.timepoints not in (1, 2, 3):
            raise TrainConfigError(f"timepoints must be 1, 2 or 3, got {self.timepoints}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise TrainConfigError("patience values must be positive")
        if not 0 < self.lr_factor < 1:
            raise TrainConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if not self.lr > 0:
            raise TrainConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("max_epochs and batch_size must be positive")
        if self.min_delta < 0:
            raise TrainConfigError("min_delta must be non-negative")
        if self.pos_weight != "balanced" and not (isinstance(self.pos_weight, (int, float)) and self.pos_weight > 0):
            raise TrainConfigError(f"pos_weight must be a positive number or 'balanced', got {self.pos_weight!r}")

    def model_config(self, precomputed_features: bool = False) -> ModelConfig:
        return ModelConfig(
            input_size=self.image_size,
            channels=tuple(self.channels),
            features=self.features,
            hidden=self.hidden,
            timepoints=self.timepoints,
            interval_scaling=self.interval_scaling,
            cam_head=self.cam_head,
            precomputed=precomputed_features,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# -- schedule ------------------------------------------------------------------------


@dataclass
class ScheduleState:
    lr0: float
    factor: float = 2.0 / 3.0
    plateau_patience: int = 10
    early_stop_patience: int = 25
    min_delta: float = 1e-6
    best: float = math.inf
    reductions: int = 0
    since_reduction: int = 0
    since_best: int = 0

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor**self.reductions

    @classmethod
    def from_config(cls, config: TrainConfig) -> "ScheduleState":
        return cls(config.lr, config.lr_factor, config.plateau_patience, config.early_stop_patience, config.min_delta)


def lr_schedule_step(state: ScheduleState, val_loss: float) -> tuple[float, bool]:
    """Feed one epoch's validation loss; returns (lr for the next epoch, stop)."""
    if val_loss < state.best - state.min_delta:
        state.best = val_loss
        state.since_best = 0
        state.since_reduction = 0
    else:
        state.since_best += 1
        state.since_reduction += 1
        if state.since_reduction >= state.plateau_patience:
            state.reductions += 1
            state.since_reduction = 0
    return state.lr, state.since_best >= state.early_stop_patience


# -- data ---------------------------------------------------------------------------


@dataclass
class SequenceData:
    """Arrays for a set of eyes, last ``timepoints`` observed visits each.

    ``inputs`` is (N, T, S, S, C) images, or (N, T, F) precomputed features.
    """

    eye_ids: list[str]
    inputs: np.ndarray
    times: np.ndarray  # (N, T)
    prediction_times: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.eye_ids)

    def last(self, timepoints: int) -> "SequenceData":
        return SequenceData(
            self.eye_ids,
            self.inputs[:, -timepoints:],
            self.times[:, -timepoints:],
            self.prediction_times,
            self.labels,
        )

    def subset(self, idx) -> "SequenceData":
        return SequenceData(
            [self.eye_ids[i] for i in idx],
            self.inputs[idx],
            self.times[idx],
            self.prediction_times[idx],
            self.labels[idx],
        )

    @property
    def precomputed(self) -> bool:
        return self.inputs.ndim == 3


def load_visit_input(path: Path, laterality: str, pconfig: PreprocessConfig) -> np.ndarray:
    """A preprocessed image, or a feature vector when the file is ``.npy``."""
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64).reshape(-1)
    return preprocess(RawImage(read_ppm(path), laterality), pconfig)


def load_sequences(
    records: list[VisitSequence],
    manifest_path: str | os.PathLike,
    timepoints: int = 3,
    pconfig: PreprocessConfig = PreprocessConfig(),
) -> SequenceData:
    if not records:
        raise TrainConfigError("no eyes to load")
    short = [r.eye_id for r in records if len(r.visits) < timepoints]
    if short:
        raise TrainConfigError(f"{len(short)} eyes have fewer than {timepoints} visits, e.g. {short[0]}")
    inputs = np.stack(
        [
            np.stack([load_visit_input(resolve(manifest_path, v.image), r.eye, pconfig) for v in r.visits[-timepoints:]])
            for r in records
        ]
    )
    return SequenceData(
        [r.eye_id for r in records],
        inputs,
        np.array([r.times[-timepoints:] for r in records], dtype=np.float64),
        np.array([r.prediction_time for r in records], dtype=np.float64),
        np.array([r.label for r in records], dtype=np.int64),
    )


def batch_scales(model: Model, data: SequenceData) -> np.ndarray:
    return np.stack([model.scales_for(t, p) for t, p in zip(data.times, data.prediction_times)])


# -- training -------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    pos_weight: float = 1.0

    def write_csv(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "wall_time"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr), f"{e.wall_time:.3f}"])


def resolve_pos_weight(config: TrainConfig, labels: np.ndarray) -> float:
    if config.pos_weight == "balanced":
        pos = int(np.sum(labels == 1))
        return float((labels.size - pos) / pos)
    return float(config.pos_weight)


def evaluate_loss(model: Model, data: SequenceData, pos_weight: float, batch_size: int = 64) -> float:
    scales = batch_scales(model, data)
    total = 0.0
    for i in range(0, len(data), batch_size):
        p = nn.sigmoid(model.logits(data.inputs[i : i + batch_size], scales[i : i + batch_size]))
        y = data.labels[i : i + batch_size]
        total += float(nn.bce_loss(p, y, pos_weight).data) * y.size
    return total / len(data)


def train(
    config: TrainConfig,
    train_data: SequenceData,
    val_data: SequenceData,
    log=None,
) -> tuple[Model, TrainHistory]:
    """Fit a model; returns the parameters with the lowest validation loss."""
    if len(np.unique(train_data.labels)) < 2:
        raise TrainConfigError("training split contains a single class")
    if len(val_data) == 0:
        raise TrainConfigError("validation split is empty")
    train_data = train_data.last(config.timepoints)
    val_data = val_data.last(config.timepoints)
    mconfig = config.model_config(precomputed_features=train_data.precomputed)
    model = Model.init(mconfig, config.seed)
    params = model.parameters()
    adam = nn.AdamState(lr=config.lr)
    sched = ScheduleState.from_config(config)
    pw = resolve_pos_weight(config, train_data.labels)
    history = TrainHistory(pos_weight=pw)
    scales = batch_scales(model, train_data)
    best_state = {k: v.data.copy() for k, v in params.items()}
    best_loss = math.inf
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train_data))
        seen, total = 0, 0.0
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            for p in params.values():
                p.zero_grad()
            prob = nn.sigmoid(model.logits(train_data.inputs[idx], scales[idx]))
            loss = nn.bce_loss(prob, train_data.labels[idx], pw)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            nn.backward(loss)
            try:
                nn.adam_update(params, {k: p.grad for k, p in params.items() if p.grad is not None}, adam)
            except nn.NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
            total += value * idx.size
            seen += idx.size
        val_loss = evaluate_loss(model, val_data, pw)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochRecord(epoch, total / seen, val_loss, adam.lr, time.perf_counter() - start))
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: v.data.copy() for k, v in params.items()}
        if log is not None:
            log(f"epoch {epoch}: train {total / seen:.5f} val {val_loss:.5f} lr {adam.lr:.4g}")
        adam.lr, stop = lr_schedule_step(sched, val_loss)
        if stop:
            break
    for k, p in params.items():
        p.data = best_state[k]
    return model, history


# -- checkpoints ---------------------------------------------------------------------------

MAGIC = b"LPGN"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    """Raised for any unreadable checkpoint; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict

    def to_model(self) -> Model:
        model = Model.init(self.model_config, 0)
        params = model.parameters()
        if list(params) != list(self.tensors):
            raise CheckpointError("tensor-names", "tensor names do not match the architecture")
        for name, p in params.items():
            if p.shape != self.tensors[name].shape:
                raise CheckpointError("shape", f"{name} has shape {self.tensors[name].shape}, expected {p.shape}")
            p.data = self.tensors[name].astype(np.float64)
        return model


def encode_checkpoint(model: Model, meta: dict | None = None, dtype: str = "<f8") -> bytes:
    if dtype not in _DTYPES:
        raise CheckpointError("dtype", f"unsupported storage dtype {dtype!r}")
    params = model.parameters()
    payload = b"".join(np.ascontiguousarray(p.data, dtype=_DTYPES[dtype]).tobytes() for p in params.values())
    header = {
        "model": model.config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(p.shape), "dtype": dtype} for n, p in params.items()],
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(model: Model, path: str | os.PathLike, meta: dict | None = None, dtype: str = "<f8"):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, meta, dtype))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 12:
        raise CheckpointError("truncated", f"file is {len(blob)} bytes, shorter than the fixed preamble")
    if blob[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {blob[:4]!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    if 12 + hlen > len(blob):
        raise CheckpointError("header-length", f"header length {hlen} runs past end of file ({len(blob)} bytes)")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("header-json", f"header is not valid JSON: {exc}") from None
    try:
        config = ModelConfig.from_dict(header["model"])
        entries = [(e["name"], tuple(int(d) for d in e["shape"]), e["dtype"]) for e in header["tensors"]]
        expect_bytes = int(header["payload_bytes"])
        crc = int(header["payload_crc32"])
        meta = dict(header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("header-schema", f"header fields malformed: {exc}") from None
    payload = blob[12 + hlen :]
    if len(payload) != expect_bytes:
        raise CheckpointError("payload-size", f"payload is {len(payload)} bytes, header says {expect_bytes}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("payload-crc", "payload checksum mismatch")
    tensors, off = {}, 0
    for name, shape, dtype in entries:
        if dtype not in _DTYPES:
            raise CheckpointError("dtype", f"{name}: unsupported dtype {dtype!r}")
        if any(d < 1 for d in shape):
            raise CheckpointError("shape", f"{name}: non-positive dimension in {shape}")
        nbytes = int(np.prod(shape)) * _DTYPES[dtype].itemsize
        if off + nbytes > len(payload):
            raise CheckpointError("shape", f"{name}: shape {shape} runs past the payload")
        tensors[name] = np.frombuffer(payload, _DTYPES[dtype], int(np.prod(shape)), off).reshape(shape).copy()
        off += nbytes
    if off != len(payload):
        raise CheckpointError("shape", f"tensor shapes cover {off} of {len(payload)} payload bytes")
    ckpt = Checkpoint(config, tensors, meta)
    ckpt.to_model()  # names and shapes must match the declared architecture
    return ckpt


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
