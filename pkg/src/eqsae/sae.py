"""TopK sparse autoencoders over 256-d base-model activations.

Four variants share one decoder form (a single affine map whose weight
columns are the dictionary) and differ in the encoder:

========== ============================== ========
variant    encoder                        latents
========== ============================== ========
regular    affine                         2048
wide       affine                         8192
two_layer  affine -> ReLU -> affine       2048
invariant  affine -> ReLU -> affine       2048
========== ============================== ========

``invariant`` is trained with the invariance objective; the others with plain
reconstruction on rotation-augmented activations.
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
from .numerics.tensor import Precision, Tensor, no_grad

log = logging.getLogger(__name__)

ACT_DIM = 256
HIDDEN = 512
GROUP_ORDER = 4

VARIANTS: dict[str, dict] = {
    "regular": {"layers": 1, "expansion": 8, "mode": "reconstruction"},
    "wide": {"layers": 1, "expansion": 8 * GROUP_ORDER, "mode": "reconstruction"},
    "two_layer": {"layers": 2, "expansion": 8, "mode": "reconstruction"},
    "invariant": {"layers": 2, "expansion": 8, "mode": "invariance"},
}

Mode = Literal["reconstruction", "invariance"]


class SaeTrainingError(RuntimeError):
    pass


@dataclass
class SaeTrainConfig:
    epochs: int = 500
    n_samples: int = 10_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class SaeModel:
    variant: str
    k: int
    n_latents: int
    params: dict[str, Tensor]
    seed: int = 0
    mode: str = "reconstruction"
    history: list[float] = field(default_factory=list)

    @property
    def two_layer(self) -> bool:
        return "enc2.weight" in self.params

    @property
    def dictionary(self) -> np.ndarray:
        """Decoder weight W_D of shape (256, n_latents); column i is feature i."""
        return self.params["dec.weight"].data

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def pre_activation(self, x: Tensor) -> Tensor:
        p = self.params
        h = F.linear(x, p["enc1.weight"], p["enc1.bias"])
        if self.two_layer:
            h = F.linear(F.relu(h), p["enc2.weight"], p["enc2.bias"])
        return h

    def encode(self, x: Tensor) -> Tensor:
        return F.topk(self.pre_activation(x), self.k)

    def decode(self, z: Tensor) -> Tensor:
        return F.linear(z, self.params["dec.weight"], self.params["dec.bias"])

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def build_sae(
    variant: str,
    k: int,
    seed: int,
    act_dim: int = ACT_DIM,
    hidden: int = HIDDEN,
    precision: Precision = Precision.SINGLE,
    n_latents: int | None = None,
) -> SaeModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown SAE variant {variant!r}")
    spec = VARIANTS[variant]
    n_latents = n_latents or spec["expansion"] * act_dim
    if not 1 <= k <= n_latents:
        raise ValueError(f"K={k} outside [1, {n_latents}]")
    rng = np.random.default_rng(seed)
    shapes: list[tuple[str, tuple[int, int]]] = []
    if spec["layers"] == 1:
        shapes.append(("enc1", (n_latents, act_dim)))
    else:
        shapes += [("enc1", (hidden, act_dim)), ("enc2", (n_latents, hidden))]
    shapes.append(("dec", (act_dim, n_latents)))
    params = {}
    for name, (out_dim, in_dim) in shapes:
        bound = 1.0 / math.sqrt(in_dim)
        params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)).astype(precision.dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(rng.uniform(-bound, bound, out_dim).astype(precision.dtype), requires_grad=True)
    return SaeModel(variant, k, n_latents, params, seed, spec["mode"])


# -- batched inference --------------------------------------------------------------


def _batched(sae: SaeModel, x: np.ndarray, fn, width: int, batch_size: int = 512) -> np.ndarray:
    dtype = sae.params["dec.weight"].data.dtype
    x = np.atleast_2d(np.asarray(x))
    out = np.empty((x.shape[0], width), dtype=dtype)
    with no_grad():
        for s in range(0, x.shape[0], batch_size):
            out[s : s + batch_size] = fn(Tensor(x[s : s + batch_size].astype(dtype))).data
    return out


def encode(sae: SaeModel, activations: np.ndarray) -> np.ndarray:
    if np.shape(activations)[-1] != ACT_DIM and np.shape(activations)[-1] != sae.params["enc1.weight"].shape[1]:
        raise ValueError(f"expected activations with {sae.params['enc1.weight'].shape[1]} features")
    return _batched(sae, activations, sae.encode, sae.n_latents)


def decode(sae: SaeModel, latents: np.ndarray) -> np.ndarray:
    if np.shape(latents)[-1] != sae.n_latents:
        raise ValueError(f"expected {sae.n_latents} latents, got {np.shape(latents)[-1]}")
    return _batched(sae, latents, sae.decode, sae.params["dec.weight"].shape[0])


def reconstruct(sae: SaeModel, activations: np.ndarray) -> np.ndarray:
    return _batched(sae, activations, sae.forward, sae.params["dec.weight"].shape[0])


def latent_l1(sae: SaeModel, activations: np.ndarray) -> float:
    """Mean over samples of the L1 norm of the latent vector."""
    z = encode(sae, activations)
    return float(np.mean(np.sum(np.abs(z.astype(np.float64)), axis=1)))


def l0(sae: SaeModel, activations: np.ndarray) -> np.ndarray:
    return np.count_nonzero(encode(sae, activations), axis=1)


def dead_latents(sae: SaeModel, activations: np.ndarray) -> np.ndarray:
    """Boolean mask of latents never kept by TopK on ``activations``."""
    z = encode(sae, activations)
    return ~np.any(z != 0, axis=0)


def invariance_ratio(sae: SaeModel, orbits: np.ndarray) -> float:
    """Mean within-orbit / mean between-orbit Euclidean distance of latent codes.

    ``orbits`` is (n, 4, d). Within: all distinct pairs inside each orbit.
    Between: pairs of latents drawn from different orbits.
    """
    n, g, d = orbits.shape
    if n < 2:
        raise ValueError("invariance_ratio needs at least two orbits")
    z = encode(sae, orbits.reshape(n * g, d)).astype(np.float64).reshape(n, g, -1)
    iu = np.triu_indices(g, 1)
    within = np.mean([np.linalg.norm(z[:, a] - z[:, b], axis=1).mean() for a, b in zip(*iu)])
    flat = z.reshape(n * g, -1)
    same = np.repeat(np.arange(n), g)
    total, count = 0.0, 0
    for s in range(0, n * g, 512):
        blk = flat[s : s + 512]
        sq = np.sum(blk * blk, axis=1)[:, None] + np.sum(flat * flat, axis=1)[None, :] - 2.0 * (blk @ flat.T)
        dist = np.sqrt(np.maximum(sq, 0.0))
        mask = same[s : s + 512, None] != same[None, :]
        total += dist[mask].sum()
        count += int(mask.sum())
    return float(within / (total / count))


# -- training ------------------------------------------------------------------------------


def invariance_batch(orbits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inputs psi(g^p x) for every orbit slot, each paired with the canonical psi(x)."""
    n, g, d = orbits.shape
    inputs = orbits.reshape(n * g, d)
    targets = np.repeat(orbits[:, 0], g, axis=0)
    return inputs, targets


def objective(sae: SaeModel, orbits: np.ndarray, mode: Mode) -> Tensor:
    """Differentiable training loss on a batch of orbits (n, 4, d)."""
    n, g, d = orbits.shape
    if mode == "invariance":
        inputs, targets = invariance_batch(orbits)
    elif mode == "reconstruction":
        inputs = targets = orbits.reshape(n * g, d)
    else:
        raise ValueError(f"unknown training mode {mode!r}")
    x = Tensor(inputs)
    return F.mse(sae.forward(x), x if targets is inputs else Tensor(targets))


def train_sae(
    sae: SaeModel,
    orbits: np.ndarray,
    mode: Mode | None = None,
    config: SaeTrainConfig | None = None,
    progress: bool = False,
) -> tuple[SaeModel, list[float]]:
    """Train on orbit-grouped activations of shape (n_orbits, 4, 256).

    reconstruction: every rotated activation is its own target, shuffled in
    minibatches of ``batch_size`` rows. invariance: each minibatch element is a
    whole orbit whose four activations all target the canonical slot 0.
    """
    config = config or SaeTrainConfig()
    mode = mode or sae.mode
    orbits = np.asarray(orbits)
    if orbits.ndim != 3 or orbits.shape[1] != GROUP_ORDER:
        raise ValueError(f"{mode} training needs orbit-grouped activations (n, 4, d), got {orbits.shape}")
    dtype = sae.params["dec.weight"].data.dtype
    orbits = orbits.astype(dtype, copy=False)
    n, g, d = orbits.shape
    rng = np.random.default_rng(config.seed)
    opt = Adam(sae.parameter_list(), lr=config.learning_rate)
    flat = orbits.reshape(n * g, d)
    history: list[float] = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        if mode == "invariance":
            order = rng.permutation(n)
            batches = ((orbits[order[s : s + config.batch_size]], None) for s in range(0, n, config.batch_size))
        elif mode == "reconstruction":
            order = rng.permutation(n * g)
            batches = ((None, flat[order[s : s + config.batch_size]]) for s in range(0, n * g, config.batch_size))
        else:
            raise ValueError(f"unknown training mode {mode!r}")
        for orbit_batch, rows in batches:
            opt.zero_grad()
            try:
                if orbit_batch is not None:
                    inputs, targets = invariance_batch(orbit_batch)
                    x = Tensor(inputs)
                    loss = F.mse(sae.forward(x), Tensor(targets))
                else:
                    x = Tensor(rows)
                    loss = F.mse(sae.forward(x), x)
            except FloatingPointError as exc:  # TopK refuses NaN inputs
                raise SaeTrainingError(f"{sae.variant} K={sae.k}: {exc} at epoch {epoch}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise SaeTrainingError(f"{sae.variant} K={sae.k}: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += value * x.shape[0]
            count += x.shape[0]
        history.append(total / count)
        if progress:
            log.info("sae %s K=%d epoch %d/%d loss %.6f", sae.variant, sae.k, epoch + 1, config.epochs, history[-1])
    sae.mode = mode
    sae.history = history
    return sae, history


# -- splicing into the base model ----------------------------------------------------------


def splice_loss(base_model, sae: SaeModel, images: np.ndarray, M: np.ndarray | None = None,
                powers: np.ndarray | None = None, activations: np.ndarray | None = None) -> float:
    """Pixel MSE of the base autoencoder with its middle layer replaced by the SAE output.

    With ``M`` given, the equivariant path M^p applied to the canonical
    reconstruction is used (p inferred unless ``powers`` is supplied).
    """
    from .base_models import decode_middle, middle_activations
    from .equivariance import equivariant_reconstruct

    images = np.asarray(images)
    psi = middle_activations(base_model, images) if activations is None else activations
    if psi.shape[1] != sae.params["dec.weight"].shape[0]:
        raise ValueError(f"activation width {psi.shape[1]} does not match SAE")
    if M is None:
        recon = reconstruct(sae, psi)
    else:
        recon, _ = equivariant_reconstruct(sae, M, psi, powers)
    out = decode_middle(base_model, recon)
    return float(np.mean((out.astype(np.float64) - images) ** 2))


# -- checkpoints -----------------------------------------------------------------------------


def save_sae(sae: SaeModel, directory: str | Path, config: SaeTrainConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, p in sae.params.items():
        etns.save(directory / f"{name}.etns", p.data)
    manifest = {
        "variant": sae.variant,
        "k": sae.k,
        "n_latents": sae.n_latents,
        "seed": sae.seed,
        "mode": sae.mode,
        "config": asdict(config) if config else None,
        "history": sae.history,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_sae(directory: str | Path) -> SaeModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    sae = build_sae(manifest["variant"], manifest["k"], manifest["seed"], n_latents=manifest["n_latents"])
    for name in sae.params:
        sae.params[name] = Tensor(etns.load(directory / f"{name}.etns"), requires_grad=True)
    sae.mode = manifest["mode"]
    sae.history = manifest.get("history") or []
    return sae
