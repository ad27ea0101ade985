"""Longitudinal progression model.

A small conv encoder is applied with one shared parameter set to every
visit image.  Each visit's feature vector is multiplied by
``1 / (t_pred - t_i)`` and the scaled rows are fed oldest-first through a
GRU; the final hidden state is the logit.  A single-image baseline (dense
head, no scaling, no recurrence) and a CAM variant (dense layer after the
GRU) share the same encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_nn as nn
from .preprocess import resize
from .tensor_nn import GruParams, Tensor


class ModelError(ValueError):
    pass


class DomainError(ValueError):
    pass


PROGRESSING = "progressing"
NON_PROGRESSING = "non-progressing"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16)
    features: int = 64
    hidden: int = 1
    timepoints: int = 3
    interval_scaling: bool = True
    cam_head: bool = False
    # inputs are per-visit feature vectors computed elsewhere; no encoder
    precomputed: bool = False

    def __post_init__(self):
        if self.timepoints < 1:
            raise ModelError(f"timepoints must be >= 1, got {self.timepoints}")
        if self.hidden < 1 or self.features < 1 or any(c < 1 for c in self.channels):
            raise ModelError("layer widths must be positive")
        if self.hidden != 1 and not self.cam_head and not self.baseline:
            raise ModelError("a hidden size above 1 needs the dense output layer (cam_head)")
        if self.input_size < 8:
            raise ModelError(f"input_size must be >= 8, got {self.input_size}")

    @property
    def baseline(self) -> bool:
        """One timepoint means the single-image comparator."""
        return self.timepoints == 1

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "features": self.features,
            "hidden": self.hidden,
            "timepoints": self.timepoints,
            "interval_scaling": self.interval_scaling,
            "cam_head": self.cam_head,
            "precomputed": self.precomputed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


# -- parameters ---------------------------------------------------------------


@dataclass
class EncoderParams:
    kernels: list[Tensor]
    biases: list[Tensor]
    input_size: int

    @property
    def features(self) -> int:
        return self.kernels[-1].shape[-1]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"encoder.conv{i}.kernel"] = k
            out[f"encoder.conv{i}.bias"] = b
        return out


@dataclass
class HeadParams:
    gru: GruParams
    cam_dense: tuple[Tensor, Tensor] | None = None

    def __post_init__(self):
        if self.cam_dense is None:
            if self.gru.hidden_size != 1:
                raise ModelError("without a dense layer the GRU state itself is the logit, so H must be 1")
        else:
            w, b = self.cam_dense
            if w.shape != (self.gru.hidden_size, 1) or b.shape != (1,):
                raise ModelError(f"cam_dense must be Hx1 plus bias, got {w.shape}, {b.shape}")

    def tensors(self) -> dict[str, Tensor]:
        out = {f"head.gru.{n}": t for n, t in self.gru.tensors().items()}
        if self.cam_dense is not None:
            out["head.dense.weight"], out["head.dense.bias"] = self.cam_dense
        return out


@dataclass
class DenseHead:
    weight: Tensor  # F x 1
    bias: Tensor  # (1,)

    def tensors(self) -> dict[str, Tensor]:
        return {"head.dense.weight": self.weight, "head.dense.bias": self.bias}


def _param(arr, name) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def init_encoder(rng: np.random.Generator, config: ModelConfig) -> EncoderParams:
    widths = [config.in_channels, *config.channels, config.features]
    kernels, biases = [], []
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        w = nn.glorot_uniform(rng, (3, 3, cin, cout), 9 * cin, 9 * cout)
        kernels.append(_param(w, f"encoder.conv{i}.kernel"))
        biases.append(_param(np.zeros(cout), f"encoder.conv{i}.bias"))
    return EncoderParams(kernels, biases, config.input_size)


def init_head(rng: np.random.Generator, config: ModelConfig):
    f, h = config.features, config.hidden
    if config.baseline:
        return DenseHead(
            _param(nn.glorot_uniform(rng, (f, 1), f, 1), "head.dense.weight"),
            _param(np.zeros(1), "head.dense.bias"),
        )
    mats = {}
    for n in GruParams.NAMES:
        if n[0] == "w":
            mats[n] = _param(nn.glorot_uniform(rng, (f, h), f, h), f"head.gru.{n}")
        elif n[0] == "u":
            mats[n] = _param(nn.glorot_uniform(rng, (h, h), h, h), f"head.gru.{n}")
        else:
            mats[n] = _param(np.zeros(h), f"head.gru.{n}")
    dense = None
    if config.cam_head:
        dense = (
            _param(nn.glorot_uniform(rng, (h, 1), h, 1), "head.dense.weight"),
            _param(np.zeros(1), "head.dense.bias"),
        )
    return HeadParams(GruParams(**mats), dense)


# -- encoder ----------------------------------------------------------------------


def encode_batch(images, params: EncoderParams):
    """Encode an (N, S, S, C) stack; returns (features N x F, conv maps N x h x w x F)."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.data.ndim != 4 or x.shape[1:3] != (params.input_size, params.input_size):
        raise ModelError(
            f"expected images of size {params.input_size}x{params.input_size}, got {tuple(x.shape[1:3])}"
        )
    h = x
    for k, b in zip(params.kernels, params.biases):
        h = nn.relu(nn.conv2d(h, k, stride=2, padding="same", bias=b))
    return nn.global_avg_pool(h), h


def encode_image(image, params: EncoderParams):
    """(features of length F, conv maps h x w x F) for one H x W x C image."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim != 3:
        raise ModelError(f"expected an HxWxC image, got shape {arr.shape}")
    feats, maps = encode_batch(arr[None], params)
    return nn.reshape(feats, (params.features,)), nn.reshape(maps, maps.shape[1:])


# -- interval scaling ---------------------------------------------------------------


def interval_scales(times, predict_time: float) -> np.ndarray:
    """``1 / (predict_time - t_i)`` for each visit time, in years."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise DomainError("need at least one visit time")
    if np.any(np.diff(t) <= 0):
        raise DomainError(f"visit times must be strictly increasing, got {t.tolist()}")
    gaps = float(predict_time) - t
    if np.any(gaps <= 0):
        raise DomainError(f"prediction time {predict_time} must come after every visit time {t.tolist()}")
    return 1.0 / gaps


def assemble_sequence(feature_vectors, scales) -> Tensor:
    """Stack T feature vectors into a T x F matrix, row i multiplied by ``scales[i]``."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    rows = feature_vectors if isinstance(feature_vectors, Tensor) else None
    if rows is None:
        vecs = [nn.as_tensor(v) for v in feature_vectors]
        if len(vecs) != s.size:
            raise ModelError(f"{len(vecs)} feature vectors but {s.size} scales")
        return nn.stack([v * float(si) for v, si in zip(vecs, s)])
    if rows.shape[0] != s.size:
        raise ModelError(f"{rows.shape[0]} feature rows but {s.size} scales")
    return rows * s[:, None]


# -- heads ----------------------------------------------------------------------------


def head_logits(seq: Tensor, head) -> Tensor:
    """Logits for a (B, T, F) batch of scaled feature matrices."""
    if isinstance(head, DenseHead):
        if seq.shape[1] != 1:
            raise ModelError(f"the single-image head takes one timepoint, got {seq.shape[1]}")
        return nn.reshape(nn.dense(nn.take(seq, 0, axis=1), head.weight, head.bias), (seq.shape[0],))
    if seq.shape[-1] != head.gru.input_size:
        raise ModelError(f"feature length {seq.shape[-1]} does not match head input {head.gru.input_size}")
    h = Tensor(np.zeros((seq.shape[0], head.gru.hidden_size)))
    for t in range(seq.shape[1]):
        h = nn.gru_step(nn.take(seq, t, axis=1), h, head.gru)
    if head.cam_dense is not None:
        h = nn.dense(h, *head.cam_dense)
    return nn.reshape(h, (seq.shape[0],))


def forward_sequence(matrix, head) -> Tensor:
    """Probability of progression for one T x F scaled feature matrix."""
    m = nn.as_tensor(matrix)
    if m.data.ndim != 2:
        raise ModelError(f"expected a T x F matrix, got shape {m.shape}")
    logit = head_logits(nn.reshape(m, (1, *m.shape)), head)
    return nn.reshape(nn.sigmoid(logit), ())


def forward_single_baseline(image, encoder: EncoderParams, head_dense: DenseHead) -> Tensor:
    feats, _ = encode_image(image, encoder)
    return nn.reshape(nn.sigmoid(nn.dense(feats, head_dense.weight, head_dense.bias)), ())


def predict(probability, threshold: float = 0.5) -> str:
    return PROGRESSING if float(probability) > threshold else NON_PROGRESSING


# -- whole model ------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams | None
    head: HeadParams | DenseHead
    _names: list[str] = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        rng = np.random.default_rng([seed, 17])
        encoder = None if config.precomputed else init_encoder(rng, config)
        return cls(config, encoder, init_head(rng, config))

    def parameters(self) -> dict[str, Tensor]:
        enc = {} if self.encoder is None else self.encoder.tensors()
        return {**enc, **self.head.tensors()}

    def scales_for(self, times, predict_time) -> np.ndarray:
        """Per-visit multipliers used by this model, all ones when scaling is off."""
        s = interval_scales(times, predict_time)
        if self.config.baseline or not self.config.interval_scaling:
            return np.ones_like(s)
        return s

    def logits(self, inputs, scales) -> Tensor:
        """Logits for images (B, T, S, S, C), or features (B, T, F), with scales (B, T)."""
        x = np.asarray(inputs, dtype=np.float64)
        b, t = x.shape[:2]
        if t != self.config.timepoints:
            raise ModelError(f"model expects {self.config.timepoints} timepoints, got {t}")
        sc = np.asarray(scales, dtype=np.float64)[:, :, None]
        if self.encoder is None:
            if x.ndim != 3 or x.shape[2] != self.config.features:
                raise ModelError(f"expected (B, T, {self.config.features}) feature input, got {x.shape}")
            seq = Tensor(x) * sc
        else:
            feats, _ = encode_batch(x.reshape(b * t, *x.shape[2:]), self.encoder)
            seq = nn.reshape(feats, (b, t, self.encoder.features)) * sc
        return head_logits(seq, self.head)

    def probabilities(self, images, scales, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            out.append(nn.sigmoid(self.logits(images[i : i + batch_size], scales[i : i + batch_size])).data)
        return np.concatenate(out) if out else np.zeros(0)


# -- class activation maps ------------------------------------------------------------------


def _minmax(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def cam_raw(images, scales, encoder: EncoderParams, head: HeadParams) -> np.ndarray:
    """Gradient-weighted maps at conv resolution, before normalisation: (T, h, w)."""
    if not isinstance(head, HeadParams) or head.cam_dense is None:
        raise ModelError("class activation maps need a head with the dense output layer (train with cam_head)")
    imgs = np.asarray(images, dtype=np.float64)
    feats, maps = encode_batch(imgs, encoder)
    leaf = Tensor(feats.data, requires_grad=True)
    seq = leaf * np.asarray(scales, dtype=np.float64)[:, None]
    logit = head_logits(nn.reshape(seq, (1, *seq.shape)), head)
    nn.backward(nn.total(logit))
    g = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    return np.einsum("thwf,tf->thw", maps.data, g)


def cam(images, scales, encoder: EncoderParams, head: HeadParams, upsample: bool = True) -> np.ndarray:
    """One heatmap in [0, 1] per timepoint, upsampled to the input size."""
    raw = cam_raw(images, scales, encoder, head)
    out = []
    for m in raw:
        m = _minmax(m)
        out.append(resize(m, encoder.input_size) if upsample else m)
    return np.stack(out)
