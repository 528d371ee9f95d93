"""The activation transform matrix M and the equivariant reconstruction path.

Activations are row vectors, so applying ``M^p`` to a batch ``X`` of shape
(n, d) is ``X @ (M^p).T``. Orbit arrays have shape (n_orbits, 4, d) with
slot p holding the activation of the image rotated p quarter turns.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import etns
from .numerics import ops as F
from .numerics.optim import Adam
from .numerics.tensor import Precision, Tensor

GROUP_ORDER = 4


class FitError(RuntimeError):
    pass


@dataclass
class FitReport:
    """R^2 of M^p against the true rotated activations for p = 1, 2, 3.

    ``r2_closure`` scores M^4 against the unrotated activation (g^4 = e); it is
    kept out of the mean because the identity matrix scores 1.0 there trivially.
    """

    r2_per_power: list[float]
    r2_mean: float
    r2_std: float
    identity_r2_per_power: list[float]
    identity_baseline_r2: float
    identity_baseline_std: float
    r2_closure: float
    epochs: int
    loss_history: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def r_squared(predicted: np.ndarray, truth: np.ndarray) -> float:
    """1 - SS_res / SS_tot with SS_tot taken around the per-dimension mean."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    if truth.shape[0] < 2:
        raise ValueError("r_squared needs at least two rows")
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2)
    if ss_tot == 0:
        raise ValueError("r_squared undefined: truth has zero total variance")
    return float(1.0 - np.sum((predicted - truth) ** 2) / ss_tot)


def matrix_power(M: np.ndarray, p: int) -> np.ndarray:
    """M^p by repeated multiplication (p >= 0)."""
    out = np.eye(M.shape[0], dtype=M.dtype)
    for _ in range(p):
        out = M @ out
    return out


def predict_transformed(M: np.ndarray, canonical: np.ndarray, p: int) -> np.ndarray:
    """Apply M to each row of ``canonical`` p times."""
    if p < 0:
        raise ValueError("power must be non-negative")
    out = np.asarray(canonical)
    for _ in range(p):
        out = out @ M.T
    return out


def _orbit_loss(M: Tensor, orbits: Tensor) -> Tensor:
    n, g, d = orbits.shape
    canon = F.reshape(F.stack_rows(F.reshape(orbits, (n * g, d)), np.arange(n) * g), (n, d))
    terms = []
    Mp = M
    for p in range(1, GROUP_ORDER + 1):
        target_rows = np.arange(n) * g + (p % g)
        target = F.stack_rows(F.reshape(orbits, (n * g, d)), target_rows)
        terms.append(F.mse(F.linear(canon, Mp), target))
        if p < GROUP_ORDER:
            Mp = F.matmul(M, Mp)
    return F.total(terms)


def orbit_loss(M: np.ndarray, orbits: np.ndarray) -> float:
    """Sum over p = 1..4 of the mean squared error of M^p psi(x) vs psi(g^p x)."""
    return _orbit_loss(Tensor(M), Tensor(np.asarray(orbits, dtype=M.dtype))).item()


def evaluate_m(M: np.ndarray, orbits: np.ndarray) -> dict:
    orbits = np.asarray(orbits, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    canon = orbits[:, 0]
    ident = np.eye(M.shape[0])
    learned, baseline = [], []
    for p in range(1, GROUP_ORDER):
        learned.append(r_squared(predict_transformed(M, canon, p), orbits[:, p]))
        baseline.append(r_squared(predict_transformed(ident, canon, p), orbits[:, p]))
    return {
        "r2_per_power": learned,
        "identity_r2_per_power": baseline,
        "r2_closure": r_squared(predict_transformed(M, canon, GROUP_ORDER), canon),
    }


def fit_m(
    orbits: np.ndarray,
    epochs: int = 150,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    eval_orbits: np.ndarray | None = None,
    precision: Precision = Precision.SINGLE,
) -> tuple[np.ndarray, FitReport]:
    """Fit M from the identity with Adam, one whole orbit per batch element.

    ``eval_orbits`` (default: the training orbits) are used for the R^2 report.
    """
    orbits = np.asarray(orbits, dtype=precision.dtype)
    if orbits.ndim != 3 or orbits.shape[1] != GROUP_ORDER:
        raise ValueError(f"expected (n, 4, d) orbit activations, got {orbits.shape}")
    n, _, d = orbits.shape
    M = Tensor(np.eye(d, dtype=precision.dtype), requires_grad=True)
    opt = Adam([M], lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            loss = _orbit_loss(M, Tensor(orbits[idx]))
            value = loss.item()
            if not math.isfinite(value):
                raise FitError(f"fit_m: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)

    ev = evaluate_m(M.data, orbits if eval_orbits is None else eval_orbits)
    report = FitReport(
        r2_per_power=ev["r2_per_power"],
        r2_mean=float(np.mean(ev["r2_per_power"])),
        r2_std=float(np.std(ev["r2_per_power"])),
        identity_r2_per_power=ev["identity_r2_per_power"],
        identity_baseline_r2=float(np.mean(ev["identity_r2_per_power"])),
        identity_baseline_std=float(np.std(ev["identity_r2_per_power"])),
        r2_closure=ev["r2_closure"],
        epochs=epochs,
        loss_history=history,
    )
    return M.data.copy(), report


# -- equivariant reconstruction -------------------------------------------------------


def infer_power(M: np.ndarray, canonical_recon: np.ndarray, activation: np.ndarray) -> np.ndarray:
    """argmin over p in 0..3 of ||activation - M^p c||^2 per row (ties -> smallest p)."""
    canonical_recon = np.atleast_2d(canonical_recon)
    activation = np.atleast_2d(activation)
    errs = np.empty((activation.shape[0], GROUP_ORDER))
    cur = canonical_recon.astype(np.float64)
    for p in range(GROUP_ORDER):
        errs[:, p] = np.sum((activation - cur) ** 2, axis=1)
        cur = cur @ M.T.astype(np.float64)
    return np.argmin(errs, axis=1)


def apply_powers(M: np.ndarray, rows: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """Row i of the result is M^powers[i] applied to rows[i]."""
    rows = np.atleast_2d(rows)
    out = rows.copy()
    cur = rows
    for p in range(1, GROUP_ORDER):
        cur = cur @ M.T
        sel = powers == p
        out[sel] = cur[sel]
    return out


def equivariant_reconstruct(sae, M: np.ndarray, activation: np.ndarray, powers: np.ndarray | None = None):
    """Canonical SAE reconstruction mapped back by M^p.

    With ``powers`` omitted, p is inferred per row by residual argmin. Accepts a
    single vector or a batch; returns (reconstruction, powers) of matching rank.
    """
    from .sae import reconstruct

    single = np.ndim(activation) == 1
    act = np.atleast_2d(activation)
    canon = reconstruct(sae, act)
    if powers is None:
        powers = infer_power(M, canon, act)
    powers = np.atleast_1d(np.asarray(powers))
    out = apply_powers(M.astype(canon.dtype), canon, powers)
    if single:
        return out[0], int(powers[0])
    return out, powers


# -- dictionary feature classification ---------------------------------------------------


@dataclass
class FeatureClassification:
    labels: list[str]  # "invariant", "equivariant" or "dead" per latent
    similarity: np.ndarray
    threshold: float

    def counts(self) -> dict[str, int]:
        return {k: self.labels.count(k) for k in ("invariant", "equivariant", "dead")}

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        live = self.similarity[~np.isnan(self.similarity)]
        return np.histogram(live, bins=bins, range=(-1.0, 1.0))


def classify_dictionary_features(
    dictionary: np.ndarray,
    M: np.ndarray,
    threshold: float = 0.9,
    alive: np.ndarray | None = None,
) -> FeatureClassification:
    """Cosine similarity between each dictionary column D_i and M D_i.

    ``dictionary`` is the decoder weight (d, n_latents). Zero-norm columns and
    columns flagged not ``alive`` are labelled dead.
    """
    D = np.asarray(dictionary, dtype=np.float64)
    MD = np.asarray(M, dtype=np.float64) @ D
    norms = np.linalg.norm(D, axis=0) * np.linalg.norm(MD, axis=0)
    dead = norms == 0
    if alive is not None:
        dead |= ~np.asarray(alive, dtype=bool)
    sim = np.full(D.shape[1], np.nan)
    ok = ~dead
    sim[ok] = np.sum(D[:, ok] * MD[:, ok], axis=0) / norms[ok]
    labels = ["dead" if dead[i] else ("invariant" if sim[i] > threshold else "equivariant") for i in range(D.shape[1])]
    return FeatureClassification(labels, sim, threshold)


# -- persistence -----------------------------------------------------------------------


def save_m(directory: str | Path, M: np.ndarray, report: FitReport) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    etns.save(directory / "M.etns", M)
    (directory / "fit_report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))


def load_m(directory: str | Path) -> tuple[np.ndarray, FitReport]:
    directory = Path(directory)
    M = etns.load(directory / "M.etns")
    report = FitReport(**json.loads((directory / "fit_report.json").read_text()))
    return M, report
