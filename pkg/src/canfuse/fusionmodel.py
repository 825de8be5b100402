"""DAVE-2 vision branch, CAN-feature MLP branch and the concatenation head.

``FusedModel`` covers both experiment arms: with ``variant="vision_only"``
there is no MLP branch and the head sees only the 10-wide CNN embedding.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import neuralnet as nn
from .errors import (ConfigMismatch, GeometryMismatch, MissingCanFeatures,
                     UnexpectedCanFeatures, BadMagic, TruncatedFile)

VARIANTS = ("vision_only", "fused")

# (out_channels, kernel, stride)
DAVE2_CONVS = [(24, 5, 2), (36, 5, 2), (48, 5, 2), (64, 3, 1), (64, 3, 1)]
DAVE2_DENSE = [100, 50, 10]

# sub-stream ids for parameter initialisation
_INIT_STREAM = {"vision": 101, "mlp": 102, "head": 103}


@dataclass
class ModelConfig:
    variant: str = "fused"
    input_h: int = 66
    input_w: int = 200
    channels: int = 3
    can_dim: int = 5
    mlp_hidden: list[int] = field(default_factory=lambda: [64, 32])
    head_hidden: list[int] = field(default_factory=lambda: [32, 16])
    seed: int = 0
    backbone: str = "dave2"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigMismatch(f"unknown variant {self.variant!r}")
        if self.variant == "fused" and self.can_dim != 5:
            raise ConfigMismatch("fused variant takes the 5 selected CAN signals")
        if self.backbone not in VISION_BACKBONES:
            raise ConfigMismatch(f"unknown vision backbone {self.backbone!r}")


def _init_rng(seed: int, part: str) -> np.random.Generator:
    return np.random.default_rng([seed, _INIT_STREAM[part]])


def build_dave2_branch(config: ModelConfig, rng: np.random.Generator | None = None) -> nn.Sequential:
    """Normalisation, five valid convolutions and a 100-50-10 dense stack."""
    if (config.input_h, config.input_w, config.channels) != (66, 200, 3):
        raise ConfigMismatch(
            f"DAVE-2 expects 66x200x3 input, got {config.input_h}x{config.input_w}x{config.channels}")
    if rng is None:
        rng = _init_rng(config.seed, "vision")
    layers: list[nn.Layer] = [nn.Normalize()]
    shape = (config.input_h, config.input_w, config.channels)
    c_in = config.channels
    for i, (c_out, k, s) in enumerate(DAVE2_CONVS):
        conv = nn.Conv2D(c_in, c_out, k, s, rng=rng)
        if i == 0:
            conv.input_grad = False
        layers += [conv, nn.ReLU()]
        shape = conv.output_shape(shape)
        c_in = c_out
    layers.append(nn.Flatten())
    width = int(np.prod(shape))
    for n_out in DAVE2_DENSE:
        layers += [nn.Dense(width, n_out, rng=rng), nn.ReLU()]
        width = n_out
    return nn.Sequential(layers)


VISION_BACKBONES: dict[str, Callable[..., nn.Sequential]] = {"dave2": build_dave2_branch}


def build_can_mlp(config: ModelConfig, rng: np.random.Generator | None = None) -> nn.Sequential:
    if config.can_dim != 5:
        raise ConfigMismatch(f"CAN MLP takes 5 features, config says {config.can_dim}")
    if rng is None:
        rng = _init_rng(config.seed, "mlp")
    layers: list[nn.Layer] = []
    width = config.can_dim
    for n_out in config.mlp_hidden:
        layers += [nn.Dense(width, n_out, rng=rng), nn.ReLU()]
        width = n_out
    return nn.Sequential(layers)


def vision_embedding_width(config: ModelConfig) -> int:
    return DAVE2_DENSE[-1]


def head_input_width(config: ModelConfig) -> int:
    width = vision_embedding_width(config)
    if config.variant == "fused":
        width += config.mlp_hidden[-1] if config.mlp_hidden else config.can_dim
    return width


def build_head(config: ModelConfig, in_width: int | None = None,
               rng: np.random.Generator | None = None) -> nn.Sequential:
    """Dense stack from the (concatenated) embedding down to one output.

    The fused head is the vision-only head drawn from the same stream, with
    its first layer widened by zero columns for the CAN embedding. At
    initialisation both variants therefore compute the same function, and
    the CAN columns only grow where the gradient consistently asks for them.
    """
    expected = head_input_width(config)
    if in_width is not None and in_width != expected:
        raise ConfigMismatch(f"head input width {in_width} != {expected} for {config.variant}")
    if rng is None:
        rng = _init_rng(config.seed, "head")
    vision_width = vision_embedding_width(config)
    layers: list[nn.Layer] = []
    width = vision_width
    for n_out in list(config.head_hidden) + [1]:
        layers += [nn.Dense(width, n_out, rng=rng), nn.ReLU()]
        width = n_out
    layers.pop()  # linear output
    if expected > vision_width:
        first = layers[0]
        widened = nn.Dense(expected, first.W.shape[0])
        widened.W[:, :vision_width] = first.W
        widened.b[...] = first.b
        layers[0] = widened
    return nn.Sequential(layers)


class FusedModel:
    """Vision branch (+ optional MLP branch) -> concatenation -> dense head.

    ``can_mean``/``can_std`` standardise the raw CAN vector before the MLP.
    They are fitted on the training split and are not trainable.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.vision = VISION_BACKBONES[config.backbone](config)
        self.mlp = build_can_mlp(config) if config.variant == "fused" else None
        self.head = build_head(config)
        self.can_mean = np.zeros(config.can_dim)
        self.can_std = np.ones(config.can_dim)

    @property
    def fused(self) -> bool:
        return self.mlp is not None

    @property
    def params(self) -> list[np.ndarray]:
        out = list(self.vision.params)
        if self.mlp is not None:
            out += self.mlp.params
        return out + self.head.params

    @property
    def grads(self) -> list[np.ndarray]:
        out = list(self.vision.grads)
        if self.mlp is not None:
            out += self.mlp.grads
        return out + self.head.grads

    def _check_inputs(self, images: np.ndarray, can) -> None:
        c = self.config
        if images.shape[1:] != (c.input_h, c.input_w, c.channels):
            raise GeometryMismatch(
                f"expected images of {c.input_h}x{c.input_w}x{c.channels}, got {images.shape[1:]}")
        if self.fused and can is None:
            raise MissingCanFeatures("fused model needs the CAN feature vector")
        if not self.fused and can is not None:
            raise UnexpectedCanFeatures("vision-only model was given CAN features")

    def forward(self, images, can=None) -> np.ndarray:
        images = np.asarray(images, dtype=nn.DTYPE)
        self._check_inputs(images, can)
        emb = self.vision.forward(images)
        self._split = emb.shape[1]
        if self.fused:
            can = np.asarray(can, dtype=nn.DTYPE).reshape(len(images), -1)
            z = (can - self.can_mean) / self.can_std
            emb = np.concatenate([emb, self.mlp.forward(z)], axis=1)
        return self.head.forward(emb)

    def backward_pass(self, dpred: np.ndarray):
        demb = self.head.backward(dpred)
        dimg = self.vision.backward(demb[:, :self._split])
        if not self.fused:
            return (dimg,)
        dz = self.mlp.backward(demb[:, self._split:])
        return dimg, dz / self.can_std


def build_model(config: ModelConfig) -> FusedModel:
    return FusedModel(config)


def parameters(model: FusedModel) -> np.ndarray:
    """Flat copy of every trainable value: vision, mlp, head, in layer order."""
    return np.concatenate([p.ravel() for p in model.params])


def set_parameters(model: FusedModel, flat: np.ndarray) -> None:
    offset = 0
    for p in model.params:
        n = p.size
        p[...] = np.asarray(flat[offset:offset + n]).reshape(p.shape)
        offset += n
    if offset != len(flat):
        raise ConfigMismatch(f"flat vector has {len(flat)} values, model has {offset}")


def predict(model: FusedModel, image, can=None) -> float:
    img = np.asarray(image, dtype=nn.DTYPE)
    if img.ndim != 3:
        raise GeometryMismatch(f"predict takes one HxWxC image, got shape {img.shape}")
    batch_can = None if can is None else np.asarray(can, dtype=nn.DTYPE).reshape(1, -1)
    return float(model.forward(img[None], batch_can)[0, 0])


def predict_batch(model: FusedModel, images, can=None, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = np.empty(len(images))
    for i in range(0, len(images), batch_size):
        sl = slice(i, i + batch_size)
        out[sl] = model.forward(images[sl], None if can is None else can[sl])[:, 0]
    return out


# ---------------------------------------------------------------------------
# self-describing checkpoint: one JSON line, then the CFNN1 tensor block
# ---------------------------------------------------------------------------

def dumps_model(model: FusedModel, state: nn.AdamState | None = None) -> bytes:
    header = {"config": asdict(model.config),
              "can_mean": model.can_mean.tolist(),
              "can_std": model.can_std.tolist()}
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    nn.write_checkpoint(buf, model.params, state)
    return buf.getvalue()


def loads_model(data: bytes) -> tuple[FusedModel, nn.AdamState | None]:
    nl = data.find(b"\n")
    if nl < 0:
        raise TruncatedFile("checkpoint has no header line")
    try:
        header = json.loads(data[:nl])
    except ValueError as exc:
        raise BadMagic(f"checkpoint header is not JSON: {exc}") from None
    model = FusedModel(ModelConfig(**header["config"]))
    model.can_mean = np.array(header["can_mean"], dtype=nn.DTYPE)
    model.can_std = np.array(header["can_std"], dtype=nn.DTYPE)
    params, state = nn.read_checkpoint(io.BytesIO(data[nl + 1:]))
    if [p.shape for p in params] != [p.shape for p in model.params]:
        raise ConfigMismatch("checkpoint tensors do not match the configured architecture")
    for dst, src in zip(model.params, params):
        dst[...] = src
    return model, state


def save_model(path, model: FusedModel, state: nn.AdamState | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model, state))


def load_model(path) -> tuple[FusedModel, nn.AdamState | None]:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
