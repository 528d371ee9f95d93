"""MLP and CNN image autoencoders whose middle layer we interpret.

The middle activation is the encoder's last affine output *before* its ReLU;
:func:`middle_activations` returns it and :meth:`BaseAutoencoder.decode_middle`
resumes the forward pass from it (ReLU, then the decoder).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .numerics import etns
from .numerics import ops as F
from .numerics.optim import Adam
from .numerics.tensor import NonFiniteError, Precision, Tensor, no_grad

log = logging.getLogger(__name__)

Kind = Literal["mlp", "cnn"]
MIDDLE_DIM = 256
IMAGE_PIXELS = 64 * 64

# (name, layer type, constructor args) exactly as in the architecture table
LAYERS: dict[str, list[tuple[str, str, dict]]] = {
    "mlp": [
        ("enc1", "linear", {"in": 4096, "out": 256}),
        ("enc2", "linear", {"in": 256, "out": 256}),
        ("dec1", "linear", {"in": 256, "out": 256}),
        ("dec2", "linear", {"in": 256, "out": 4096}),
    ],
    "cnn": [
        ("enc1", "conv2d", {"in": 1, "out": 16, "k": 3, "stride": 2, "pad": 1}),
        ("enc2", "conv2d", {"in": 16, "out": 32, "k": 3, "stride": 2, "pad": 1}),
        ("enc3", "conv2d", {"in": 32, "out": 256, "k": 16, "stride": 1, "pad": 0}),
        ("dec1", "conv_transpose2d", {"in": 256, "out": 32, "k": 16, "stride": 1, "pad": 0, "out_pad": 0}),
        ("dec2", "conv_transpose2d", {"in": 32, "out": 16, "k": 3, "stride": 2, "pad": 1, "out_pad": 1}),
        ("dec3", "conv_transpose2d", {"in": 16, "out": 1, "k": 3, "stride": 2, "pad": 1, "out_pad": 1}),
    ],
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BaseTrainConfig:
    epochs: int = 100
    n_samples: int = 10_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


def _weight_shape(kind: str, args: dict) -> tuple[tuple[int, ...], int]:
    """Weight shape and the fan-in used for initialization."""
    if kind == "linear":
        return (args["out"], args["in"]), args["in"]
    k = args["k"]
    if kind == "conv2d":
        return (args["out"], args["in"], k, k), args["in"] * k * k
    # each output pixel of a transposed conv sees ceil(k/stride)^2 input positions
    taps = math.ceil(k / args["stride"]) ** 2
    return (args["in"], args["out"], k, k), args["in"] * taps


@dataclass
class BaseAutoencoder:
    kind: str
    params: dict[str, Tensor]
    seed: int = 0
    history: list[float] = field(default_factory=list)

    @property
    def layers(self) -> list[tuple[str, str, dict]]:
        return LAYERS[self.kind]

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _apply(self, name: str, x: Tensor) -> Tensor:
        layer = dict((n, (t, a)) for n, t, a in self.layers)[name]
        kind, args = layer
        W, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if kind == "linear":
            return F.linear(x, W, b)
        if kind == "conv2d":
            return F.conv2d(x, W, b, args["stride"], args["pad"])
        return F.conv_transpose2d(x, W, b, args["stride"], args["pad"], args["out_pad"])

    def encode_middle(self, images: Tensor) -> Tensor:
        """(n, 1, 64, 64) images -> (n, 256) pre-activation middle layer."""
        n = images.shape[0]
        if self.kind == "mlp":
            h = F.relu(self._apply("enc1", F.reshape(images, (n, IMAGE_PIXELS))))
            return self._apply("enc2", h)
        h = F.relu(self._apply("enc1", images))
        h = F.relu(self._apply("enc2", h))
        return F.reshape(self._apply("enc3", h), (n, MIDDLE_DIM))

    def decode_middle(self, middle: Tensor) -> Tensor:
        """(n, 256) middle activations -> (n, 1, 64, 64) reconstructions."""
        n = middle.shape[0]
        h = F.relu(middle)
        if self.kind == "mlp":
            h = F.relu(self._apply("dec1", h))
            return F.reshape(self._apply("dec2", h), (n, 1, 64, 64))
        h = F.reshape(h, (n, MIDDLE_DIM, 1, 1))
        h = F.relu(self._apply("dec1", h))
        h = F.relu(self._apply("dec2", h))
        return self._apply("dec3", h)

    def forward(self, images: Tensor) -> Tensor:
        return self.decode_middle(self.encode_middle(images))

    def layer_manifest(self) -> list[dict]:
        out = []
        for name, kind, args in self.layers:
            out.append({
                "name": name,
                "type": kind,
                "args": args,
                "weight": list(self.params[f"{name}.weight"].shape),
                "bias": list(self.params[f"{name}.bias"].shape),
            })
        return out


def build_base(kind: Kind, seed: int, precision: Precision = Precision.SINGLE) -> BaseAutoencoder:
    if kind not in LAYERS:
        raise ValueError(f"unknown base model kind {kind!r}")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, layer_kind, args in LAYERS[kind]:
        shape, fan_in = _weight_shape(layer_kind, args)
        bound = 1.0 / math.sqrt(fan_in)
        for suffix, sh in (("weight", shape), ("bias", (args["out"],))):
            data = rng.uniform(-bound, bound, size=sh).astype(precision.dtype)
            params[f"{name}.{suffix}"] = Tensor(data, requires_grad=True)
    return BaseAutoencoder(kind, params, seed)


def train_base(
    model: BaseAutoencoder,
    images: np.ndarray,
    config: BaseTrainConfig,
    progress: bool = False,
) -> tuple[BaseAutoencoder, list[float]]:
    """Minimize pixel MSE with Adam; returns the model and per-epoch mean losses."""
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameter_list(), lr=config.learning_rate)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = Tensor(images[idx])
            opt.zero_grad()
            loss = F.mse(model.forward(x), x)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"{model.kind} base model: non-finite loss at epoch {epoch}, step {start // config.batch_size}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        if progress:
            log.info("base %s epoch %d/%d loss %.6f", model.kind, epoch + 1, config.epochs, history[-1])
    model.history = history
    return model, history


def middle_activations(model: BaseAutoencoder, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (1, 64, 64):
        raise ValueError(f"expected (n, 1, 64, 64) images, got {images.shape}")
    dtype = next(iter(model.params.values())).data.dtype
    out = np.empty((images.shape[0], MIDDLE_DIM), dtype=dtype)
    with no_grad():
        for s in range(0, images.shape[0], batch_size):
            out[s : s + batch_size] = model.encode_middle(Tensor(images[s : s + batch_size].astype(dtype))).data
    return out


def decode_middle(model: BaseAutoencoder, middle: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = next(iter(model.params.values())).data.dtype
    out = np.empty((middle.shape[0], 1, 64, 64), dtype=dtype)
    with no_grad():
        for s in range(0, middle.shape[0], batch_size):
            out[s : s + batch_size] = model.decode_middle(Tensor(middle[s : s + batch_size].astype(dtype))).data
    return out


def reconstruction_loss(model: BaseAutoencoder, images: np.ndarray) -> float:
    recon = decode_middle(model, middle_activations(model, images))
    return float(np.mean((recon.astype(np.float64) - images) ** 2))


# -- checkpoints --------------------------------------------------------------------


def save_base(model: BaseAutoencoder, directory: str | Path, config: BaseTrainConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, p in model.params.items():
        etns.save(directory / f"{name}.etns", p.data)
    manifest = {
        "kind": model.kind,
        "seed": model.seed,
        "layers": model.layer_manifest(),
        "config": asdict(config) if config else None,
        "history": model.history,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_base(directory: str | Path) -> BaseAutoencoder:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = build_base(manifest["kind"], manifest["seed"])
    for name in model.params:
        arr = etns.load(directory / f"{name}.etns")
        if arr.shape != model.params[name].shape:
            raise ValueError(f"{directory}/{name}: shape {arr.shape} != {model.params[name].shape}")
        model.params[name] = Tensor(arr, requires_grad=True)
    model.history = manifest.get("history") or []
    return model


def check_finite_params(model: BaseAutoencoder) -> None:
    for name, p in model.params.items():
        try:
            p.check_finite(name)
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc)) from exc
