"""Hotspot network: frame encoder, pooled LSTM aggregator, action classifier,
anticipation module, plus the supervised image-to-heatmap baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import BN_EPS, BN_MOMENTUM, FEATURE_CHANNELS, IMAGE_SIZE
from tensor import (
    BatchNormParams,
    LSTMParams,
    ShapeError,
    Tensor,
    avg_pool_spatial,
    batchnorm2d,
    bilinear_upsample,
    conv2d,
    conv_output_size,
    getitem,
    l2_pool_spatial,
    linear,
    lstm_step,
    parameter,
    relu,
    reshape,
    sigmoid,
)

_logger = logging.getLogger(__name__)

POOL_MODES = ("l2", "l2_mean", "avg")


# ─── Encoder configuration ───────────────────────────────────────────────────
@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def to_list(self) -> List[int]:
        return [self.out_channels, self.kernel, self.stride, self.dilation, self.padding]

    @classmethod
    def from_list(cls, raw: Sequence[int]) -> "ConvStage":
        if len(raw) != 5:
            raise ValueError(f"Encoder stage must be [out, kernel, stride, dilation, padding], got {raw!r}")
        out, kernel, stride, dilation, padding = (int(v) for v in raw)
        if out < 1 or kernel < 1 or stride < 1 or dilation < 1 or padding < 0:
            raise ValueError(f"Encoder stage values out of range: {raw!r}")
        return cls(out, kernel, stride, dilation, padding)


def stage_resolution(stages: Sequence[ConvStage], image_size: int) -> int:
    size = image_size
    for stage in stages:
        size = conv_output_size(size, stage.kernel, stage.stride, stage.padding, stage.dilation)
        if size < 1:
            raise ValueError(f"Encoder stages collapse a {image_size}px input to nothing")
    return size


@dataclass(frozen=True)
class EncoderConfig:
    """Plain conv/ReLU stack; ``dilated`` pins the last two stages to unit stride."""

    stages: Tuple[ConvStage, ...]
    image_size: int = IMAGE_SIZE
    dilated: bool = True

    def __post_init__(self) -> None:
        if len(self.stages) < 2:
            raise ValueError("Encoder needs at least two stages")
        if self.dilated and any(s.stride != 1 for s in self.stages[-2:]):
            raise ValueError("A dilated encoder must use stride 1 in its final two stages")
        stage_resolution(self.stages, self.image_size)

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].out_channels

    @property
    def feature_resolution(self) -> int:
        return stage_resolution(self.stages, self.image_size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stages": [s.to_list() for s in self.stages],
            "image_size": self.image_size,
            "dilated": self.dilated,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "EncoderConfig":
        return cls(
            stages=tuple(ConvStage.from_list(s) for s in raw["stages"]),
            image_size=int(raw["image_size"]),
            dilated=bool(raw["dilated"]),
        )


def default_encoder_config(d: int = FEATURE_CHANNELS, image_size: int = IMAGE_SIZE, *, dilated: bool = True) -> EncoderConfig:
    """Stem plus four stages (stride 2, 2, 1, 1; dilation 1, 1, 2, 4): 64px -> d×8×8.

    Without dilation the last two stages downsample instead (64px -> d×2×2).
    """

    stages = [
        ConvStage(max(4, d // 4), 3, 2, 1, 1),
        ConvStage(max(4, d // 2), 3, 2, 1, 1),
        ConvStage(d, 3, 2, 1, 1),
    ]
    if dilated:
        stages += [ConvStage(d, 3, 1, 2, 2), ConvStage(d, 3, 1, 4, 4)]
    else:
        stages += [ConvStage(d, 3, 2, 1, 1), ConvStage(d, 3, 2, 1, 1)]
    return EncoderConfig(tuple(stages), image_size=image_size, dilated=dilated)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    actions: Tuple[str, ...]
    objects: Tuple[str, ...] = ()
    pool: str = "l2"
    anticipation: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pool not in POOL_MODES:
            raise ValueError(f"pool must be one of {POOL_MODES}, got {self.pool!r}")
        if len(self.actions) < 1:
            raise ValueError("Action vocabulary is empty")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": self.encoder.to_dict(),
            "actions": list(self.actions),
            "objects": list(self.objects),
            "pool": self.pool,
            "anticipation": self.anticipation,
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(raw["encoder"]),
            actions=tuple(raw["actions"]),
            objects=tuple(raw.get("objects", ())),
            pool=raw.get("pool", "l2"),
            anticipation=bool(raw.get("anticipation", True)),
            dtype=raw.get("dtype", "float32"),
            seed=int(raw.get("seed", 0)),
        )


@dataclass
class StepOutputs:
    """Per-step pooled features g_t, hidden states h_t, logits y_t and h_*."""

    features: Tensor
    pooled: List[Tensor]
    hidden: List[Tensor]
    logits: List[Tensor]

    @property
    def final(self) -> Tensor:
        return self.hidden[-1]

    @property
    def steps(self) -> int:
        return len(self.hidden)

    def logits_array(self) -> np.ndarray:
        """Step logits stacked on axis -2: (T, K) or (B, T, K)."""

        return np.stack([y.data for y in self.logits], axis=-2)


# ─── Initialisation helpers ──────────────────────────────────────────────────
def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype, name: str) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)), dtype=dtype, name=name)


def _zeros(shape, dtype, name: str) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype, name=name)


def _batchnorm(channels: int, dtype, prefix: str) -> BatchNormParams:
    return BatchNormParams(
        gamma=parameter(np.ones(channels), dtype=dtype, name=f"{prefix}.gamma"),
        beta=parameter(np.zeros(channels), dtype=dtype, name=f"{prefix}.beta"),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )


def _pool(x: Tensor, mode: str) -> Tensor:
    if mode == "avg":
        return avg_pool_spatial(x)
    return l2_pool_spatial(x, normalize=(mode == "l2_mean"))


# ─── Hotspot model ───────────────────────────────────────────────────────────
class HotspotModel:
    """Encoder + LSTM aggregator + linear classifier + anticipation module."""

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        enc = config.encoder
        d = enc.feature_channels
        k = config.num_actions

        self.encoder: List[Tuple[ConvStage, Tensor, Tensor]] = []
        c_in = 3
        for idx, stage in enumerate(enc.stages):
            weight = _he_conv(rng, stage.out_channels, c_in, stage.kernel, self.dtype, f"encoder.{idx}.weight")
            bias = _zeros(stage.out_channels, self.dtype, f"encoder.{idx}.bias")
            self.encoder.append((stage, weight, bias))
            c_in = stage.out_channels

        bound = 1.0 / np.sqrt(d)
        self.lstm = LSTMParams(
            w_ih=parameter(rng.uniform(-bound, bound, size=(4 * d, d)), dtype=self.dtype, name="lstm.w_ih"),
            w_hh=parameter(rng.uniform(-bound, bound, size=(4 * d, d)), dtype=self.dtype, name="lstm.w_hh"),
            bias=parameter(rng.uniform(-bound, bound, size=(4 * d,)), dtype=self.dtype, name="lstm.bias"),
        )
        self.classifier_weight = parameter(rng.uniform(-bound, bound, size=(k, d)), dtype=self.dtype, name="classifier.weight")
        self.classifier_bias = _zeros(k, self.dtype, "classifier.bias")

        self.anticipation: List[Tuple[Tensor, BatchNormParams]] = []
        for idx in range(2):
            weight = _he_conv(rng, d, d, 3, self.dtype, f"ant.{idx}.conv.weight")
            self.anticipation.append((weight, _batchnorm(d, self.dtype, f"ant.{idx}.bn")))
        _logger.debug(
            "🧠 hotspot model d=%d n=%d K=%d pool=%s anticipation=%s",
            d, enc.feature_resolution, k, config.pool, config.anticipation,
        )

    # ------------------------------------------------------------------
    @property
    def feature_channels(self) -> int:
        return self.config.encoder.feature_channels

    @property
    def feature_resolution(self) -> int:
        return self.config.encoder.feature_resolution

    @property
    def actions(self) -> Tuple[str, ...]:
        return self.config.actions

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for _, weight, bias in self.encoder:
            params[weight.name] = weight
            params[bias.name] = bias
        params["lstm.w_ih"] = self.lstm.w_ih
        params["lstm.w_hh"] = self.lstm.w_hh
        params["lstm.bias"] = self.lstm.bias
        params["classifier.weight"] = self.classifier_weight
        params["classifier.bias"] = self.classifier_bias
        for weight, bn in self.anticipation:
            params[weight.name] = weight
            params[bn.gamma.name] = bn.gamma
            params[bn.beta.name] = bn.beta
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for idx, (_, bn) in enumerate(self.anticipation):
            out[f"ant.{idx}.bn.running_mean"] = bn.running_mean
            out[f"ant.{idx}.bn.running_var"] = bn.running_var
            out[f"ant.{idx}.bn.updates"] = np.array([bn.updates], dtype=np.float64)
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        expected = set(params) | set(self.buffers())
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ValueError(f"State mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} vs model {tensor.shape}")
            tensor.data = value.astype(self.dtype, copy=True)
        for idx, (_, bn) in enumerate(self.anticipation):
            bn.running_mean[...] = state[f"ant.{idx}.bn.running_mean"]
            bn.running_var[...] = state[f"ant.{idx}.bn.running_var"]
            bn.updates = int(np.asarray(state[f"ant.{idx}.bn.updates"]).reshape(-1)[0])

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def reset_anticipation_to_identity(self) -> None:
        """Centre-tap identity convs, unit BN affine and moments: F_ant(x) = x for x ≥ 0 in eval mode."""

        d = self.feature_channels
        for weight, bn in self.anticipation:
            kernel = np.zeros((d, d, 3, 3), dtype=self.dtype)
            kernel[np.arange(d), np.arange(d), 1, 1] = 1
            weight.data = kernel
            bn.gamma.data = np.ones(d, dtype=self.dtype)
            bn.beta.data = np.zeros(d, dtype=self.dtype)
            bn.running_mean[...] = 0
            bn.running_var[...] = 1 - bn.eps
            bn.updates = max(bn.updates, 1)

    # ------------------------------------------------------------------
    def _check_image(self, image: Tensor) -> None:
        size = self.config.encoder.image_size
        if image.ndim not in (3, 4) or image.shape[-3:] != (3, size, size):
            raise ShapeError(f"encode_frame expects 3×{size}×{size} images, got {image.shape}")

    def encode_frame(self, image: Tensor) -> Tensor:
        """3×H×W (or N×3×H×W) image -> d×n×n feature map."""

        self._check_image(image)
        x = image
        for stage, weight, bias in self.encoder:
            x = relu(conv2d(x, weight, bias, stride=stage.stride, padding=stage.padding, dilation=stage.dilation))
        return x

    def pool(self, features: Tensor) -> Tensor:
        return _pool(features, self.config.pool)

    def zero_state(self, batch: Optional[int] = None) -> Tuple[Tensor, Tensor]:
        shape = (self.feature_channels,) if batch is None else (batch, self.feature_channels)
        return Tensor(np.zeros(shape, dtype=self.dtype)), Tensor(np.zeros(shape, dtype=self.dtype))

    def classify(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.classifier_weight, self.classifier_bias)

    def forward_video(self, clip: Tensor) -> StepOutputs:
        """T×3×H×W clip (or B×T×3×H×W batch) through encoder, pooling and the LSTM."""

        if clip.ndim not in (4, 5):
            raise ShapeError(f"forward_video expects T×3×H×W or B×T×3×H×W, got {clip.shape}")
        batched = clip.ndim == 5
        steps = clip.shape[-4]
        if steps < 1:
            raise ShapeError("forward_video: empty clip")
        frames = reshape(clip, (-1,) + clip.shape[-3:])
        features = self.encode_frame(frames)
        pooled_all = self.pool(features)
        d = self.feature_channels
        if batched:
            pooled_all = reshape(pooled_all, (clip.shape[0], steps, d))
            state = self.zero_state(clip.shape[0])
        else:
            state = self.zero_state()

        pooled, hidden, logits = [], [], []
        for t in range(steps):
            g_t = getitem(pooled_all, (slice(None), t) if batched else t)
            state = lstm_step(g_t, state, self.lstm)
            pooled.append(g_t)
            hidden.append(state[0])
            logits.append(self.classify(state[0]))
        return StepOutputs(features=features, pooled=pooled, hidden=hidden, logits=logits)

    def _check_features(self, x: Tensor) -> None:
        d, n = self.feature_channels, self.feature_resolution
        if x.ndim not in (3, 4) or x.shape[-3:] != (d, n, n):
            raise ShapeError(f"expected {d}×{n}×{n} feature maps, got {x.shape}")

    def anticipate(self, x_inactive: Tensor, *, training: bool = False) -> Tensor:
        """x̃_I = F_ant(x_I): two channel-preserving conv3×3 -> BN -> ReLU blocks."""

        self._check_features(x_inactive)
        x = x_inactive
        for weight, bn in self.anticipation:
            x = relu(batchnorm2d(conv2d(x, weight, None, stride=1, padding=1), bn, training=training))
        return x

    def forward_inactive(self, x_inactive: Tensor, *, training: bool = False) -> Tensor:
        """Action scores from one LSTM step (zero state) on the anticipated embedding."""

        self._check_features(x_inactive)
        x = self.anticipate(x_inactive, training=training) if self.config.anticipation else x_inactive
        return self.score_features(x)

    def score_features(self, features: Tensor) -> Tensor:
        pooled = self.pool(features)
        batch = pooled.shape[0] if pooled.ndim == 2 else None
        hidden, _ = lstm_step(pooled, self.zero_state(batch), self.lstm)
        return self.classify(hidden)


# ─── Img2Heatmap baseline ────────────────────────────────────────────────────
@dataclass(frozen=True)
class Img2HeatmapConfig:
    actions: Tuple[str, ...]
    image_size: int = IMAGE_SIZE
    channels: Tuple[int, ...] = (8, 16, 32)
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        factor = 2 ** len(self.channels)
        if self.image_size % factor:
            raise ValueError(f"image_size {self.image_size} must be divisible by {factor}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "actions": list(self.actions),
            "image_size": self.image_size,
            "channels": list(self.channels),
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Img2HeatmapConfig":
        return cls(
            actions=tuple(raw["actions"]),
            image_size=int(raw["image_size"]),
            channels=tuple(int(c) for c in raw["channels"]),
            dtype=raw.get("dtype", "float32"),
            seed=int(raw.get("seed", 0)),
        )


class Img2HeatmapModel:
    """Fully convolutional encoder-decoder with bilinear upsampling and K sigmoid maps."""

    def __init__(self, config: Img2HeatmapConfig) -> None:
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        self.down: List[Tuple[Tensor, Tensor]] = []
        c_in = 3
        for idx, c_out in enumerate(config.channels):
            self.down.append((_he_conv(rng, c_out, c_in, 3, self.dtype, f"down.{idx}.weight"),
                              _zeros(c_out, self.dtype, f"down.{idx}.bias")))
            c_in = c_out
        mirrored = list(reversed(config.channels[:-1])) + [len(config.actions)]
        self.up: List[Tuple[Tensor, Tensor]] = []
        for idx, c_out in enumerate(mirrored):
            self.up.append((_he_conv(rng, c_out, c_in, 3, self.dtype, f"up.{idx}.weight"),
                            _zeros(c_out, self.dtype, f"up.{idx}.bias")))
            c_in = c_out

    @property
    def actions(self) -> Tuple[str, ...]:
        return self.config.actions

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for weight, bias in self.down + self.up:
            params[weight.name] = weight
            params[bias.name] = bias
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError(f"State mismatch: {sorted(set(state) ^ set(params))}")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} vs model {tensor.shape}")
            tensor.data = value.astype(self.dtype, copy=True)

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def forward_logits(self, image: Tensor) -> Tensor:
        size = self.config.image_size
        if image.ndim not in (3, 4) or image.shape[-3:] != (3, size, size):
            raise ShapeError(f"img2heatmap expects 3×{size}×{size} images, got {image.shape}")
        x = image
        for weight, bias in self.down:
            x = relu(conv2d(x, weight, bias, stride=2, padding=1))
        last = len(self.up) - 1
        for idx, (weight, bias) in enumerate(self.up):
            x = bilinear_upsample(x, (x.shape[-2] * 2, x.shape[-1] * 2))
            x = conv2d(x, weight, bias, stride=1, padding=1)
            if idx != last:
                x = relu(x)
        return x

    def forward(self, image: Tensor) -> Tensor:
        return sigmoid(self.forward_logits(image))


def img2heatmap_forward(image: Tensor, model: Img2HeatmapModel) -> Tensor:
    """K×H×W sigmoid maps for a 3×H×W image."""

    return model.forward(image)
