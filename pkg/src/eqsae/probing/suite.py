"""Run every probing task against every representation and aggregate F1."""

from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..dataset import FAMILIES, TaskSpec
from .gbt import GBTParams, presort
from .probes import (
    LogRegParams,
    ProbeDataset,
    gbt_probe,
    knn_neighbors,
    knn_probe,
    logreg_probe,
    select_top_latents,
)

log = logging.getLogger(__name__)

PROBES = ("knn", "logreg", "gbt")
CSV_COLUMNS = (
    "task_family", "shape", "position", "orientation", "representation",
    "sae_variant", "K", "trunc_len", "probe", "f1", "best_flag", "seed",
)


@dataclass
class Representation:
    """Features for probing.

    ``activations``: fixed ``features``. ``latents_truncated`` and
    ``reconstruction_truncated``: derived per task from SAE ``latents`` after
    truncation; the reconstruction decodes the masked latents and, when
    ``M``/``powers`` are set, maps them by M^p row-wise.
    """

    kind: str
    sae_variant: str = ""
    K: int | None = None
    features: np.ndarray | None = None
    latents: np.ndarray | None = None
    decoder_weight: np.ndarray | None = None
    decoder_bias: np.ndarray | None = None
    M: np.ndarray | None = None
    powers: np.ndarray | None = None

    @property
    def truncated(self) -> bool:
        return self.kind != "activations"

    @property
    def key(self) -> str:
        return self.kind if not self.sae_variant else f"{self.kind}:{self.sae_variant}"

    def build(self, selected: np.ndarray | None) -> np.ndarray:
        if self.kind == "activations":
            return self.features
        z = self.latents[:, selected]
        if self.kind == "latents_truncated":
            return z
        if self.kind != "reconstruction_truncated":
            raise ValueError(f"unknown representation kind {self.kind!r}")
        recon = z.astype(np.float64) @ self.decoder_weight[:, selected].T.astype(np.float64) + self.decoder_bias
        if self.M is not None:
            from ..equivariance import apply_powers

            recon = apply_powers(self.M.astype(np.float64), recon, self.powers)
        return recon


@dataclass
class ProbeResult:
    task: TaskSpec
    representation: str
    sae_variant: str
    K: int | None
    trunc_len: int | None
    probe: str
    f1: float
    best: bool = False
    seed: int = 0
    error: str = ""


@dataclass
class SuiteOutput:
    results: list[ProbeResult] = field(default_factory=list)

    def best(self) -> list[ProbeResult]:
        return [r for r in self.results if r.best]

    def aggregate(self) -> dict[tuple[str, str], dict[str, float]]:
        """{(representation, sae_variant): {family: mean best F1, 'ALL': ...}}."""
        out: dict[tuple[str, str], dict[str, list[float]]] = {}
        for r in self.best():
            fams = out.setdefault((r.representation, r.sae_variant), {f: [] for f in FAMILIES + ("ALL",)})
            fams[r.task.family].append(r.f1)
            fams["ALL"].append(r.f1)
        return {k: {f: float(np.mean(v)) if v else float("nan") for f, v in fams.items()} for k, fams in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.results:
            t = r.task
            w.writerow([
                t.family, t.shape,
                "" if t.position is None else t.position,
                "" if t.orientation is None else t.orientation,
                r.representation, r.sae_variant,
                "" if r.K is None else r.K,
                "" if r.trunc_len is None else r.trunc_len,
                r.probe, f"{r.f1:.6f}", int(r.best), r.seed,
            ])
        return buf.getvalue()


def task_seed(seed: int, task: TaskSpec) -> int:
    return (seed * 1_000_003 + zlib.crc32(task.name.encode())) % (2**31)


def orbit_split(n_orbits: int, seed: int, train_frac: float = 0.75, group: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Row split that keeps the rotations of one orbit on the same side."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_orbits)
    n_train = int(round(train_frac * n_orbits))
    rows = lambda orbits: np.sort((orbits[:, None] * group + np.arange(group)).ravel())  # noqa: E731
    return rows(perm[:n_train]), rows(perm[n_train:])


def run_task_suite(
    representations: Sequence[Representation],
    labels: np.ndarray,
    tasks: Sequence[TaskSpec],
    train: np.ndarray,
    test: np.ndarray,
    L: int | None,
    seed: int = 0,
    probes: Sequence[str] = PROBES,
    gbt_params: GBTParams | None = None,
    logreg_params: LogRegParams | None = None,
) -> SuiteOutput:
    """Probe every (task, representation) pair with every probe.

    ``labels`` is the (n_rows, n_tasks) boolean table. ``L`` is the truncation
    length for truncated representations (unused otherwise). Truncation statistics
    come from ``train`` rows only. A task that raises is recorded with f1=0 and
    an error message instead of aborting the suite.
    """
    out = SuiteOutput()
    cache: dict[str, tuple] = {}
    for rep in representations:
        if not rep.truncated:
            xt = rep.features[train]
            cache[rep.key] = (knn_neighbors(xt, rep.features[test]) if "knn" in probes else None,
                              presort(xt) if "gbt" in probes else None)

    for t_idx, task in enumerate(tasks):
        y = labels[:, t_idx]
        tseed = task_seed(seed, task)
        for rep in representations:
            selected = None
            rows: list[ProbeResult] = []
            try:
                if rep.truncated:
                    selected = select_top_latents(rep.latents[train], y[train], L)
                feats = rep.build(selected)
                data = ProbeDataset(feats, y, train, test)
                neigh, pre = cache.get(rep.key, (None, None))
                for probe in probes:
                    if probe == "knn":
                        f1 = knn_probe(data, neighbors=neigh)
                    elif probe == "logreg":
                        f1 = logreg_probe(data, seed=tseed, params=logreg_params)
                    elif probe == "gbt":
                        f1 = gbt_probe(data, params=gbt_params, presorted=pre)
                    else:
                        raise ValueError(f"unknown probe {probe!r}")
                    rows.append(ProbeResult(task, rep.kind, rep.sae_variant, rep.K,
                                            L if rep.truncated else None, probe, f1, seed=seed))
            except Exception as exc:  # one failing task must not abort the suite
                log.warning("task %s on %s failed: %s", task.name, rep.key, exc)
                rows = [ProbeResult(task, rep.kind, rep.sae_variant, rep.K, L if rep.truncated else None,
                                    probe, 0.0, seed=seed, error=str(exc)) for probe in probes]
            best = max(range(len(rows)), key=lambda i: (rows[i].f1, -i))
            rows[best].best = True
            out.results.extend(rows)
    return out
