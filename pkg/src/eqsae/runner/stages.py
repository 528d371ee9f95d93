"""Pipeline stages: data -> base models -> (M, SAEs) -> probing -> report.

Every stage job reads only artifacts of declared upstream jobs and writes only
below its own directory. A job is skipped (cache hit) when the manifest holds a
record with the same fingerprint and its recorded outputs are intact on disk.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dataset as ds
from ..base_models import BaseTrainConfig, build_base, load_base, middle_activations, save_base, train_base
from ..equivariance import classify_dictionary_features, equivariant_reconstruct, fit_m, load_m, save_m
from ..numerics import etns
from ..probing.suite import Representation, SuiteOutput, orbit_split, run_task_suite
from ..sae import (
    SaeTrainConfig, build_sae, dead_latents, encode, invariance_ratio, latent_l1, load_sae, save_sae,
    splice_loss, train_sae,
)
from .config import ExperimentConfig
from .manifest import RunManifest, StageRecord, derive_seed, tree_checksums

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-base", "fit-m", "train-sae", "probe", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class StageDependencyError(StageError):
    pass


@dataclass
class Job:
    key: str
    stage: str
    outputs: list[str]  # directories relative to the run root
    upstream: list[str]
    config_keys: list[str]
    seed: int
    args: dict = field(default_factory=dict)


# -- job bodies (module level so they can run in worker processes) --------------------------


def _gen_data(root: Path, cfg: dict, seed: int, args: dict) -> None:
    n = cfg["n_samples"]
    train_seed = derive_seed(cfg["seed"], "gen-data", "train")
    sets = {
        # base and orbit sets share their canonical images (same generator seed)
        "base": (n, train_seed, "random_rotation"),
        "orbits": (n, train_seed, "all_rotations"),
        "eval": (cfg["eval_orbits"], derive_seed(cfg["seed"], "gen-data", "eval"), "all_rotations"),
        "probe": (cfg["probe_orbits"], derive_seed(cfg["seed"], "gen-data", "probe"), "all_rotations"),
    }
    for name, (count, s, augment) in sets.items():
        specs = ds.generate_specs(count, s, augment)
        meta = {"split": name, "n_canonical": count, "seed": s, "augment": augment}
        ds.save_dataset(root / "data" / name, specs, ds.render_specs(specs), meta)


def _train_base(root: Path, cfg: dict, seed: int, args: dict) -> None:
    kind = args["kind"]
    _, images, _ = ds.load_dataset(root / "data" / "base")
    config = BaseTrainConfig(epochs=cfg["base_epochs"], n_samples=images.shape[0], batch_size=cfg["batch_size"],
                             learning_rate=cfg["learning_rate"], seed=seed)
    model = build_base(kind, seed)
    train_base(model, images, config)
    save_base(model, root / "base" / kind, config)
    for split in ("orbits", "eval", "probe"):
        _, imgs, _ = ds.load_dataset(root / "data" / split)
        etns.save(root / "acts" / kind / f"{split}.etns", middle_activations(model, imgs))


def _orbits(root: Path, kind: str, split: str) -> np.ndarray:
    acts = etns.load(root / "acts" / kind / f"{split}.etns")
    return acts.reshape(-1, ds.GROUP_ORDER, acts.shape[1])


def _fit_m(root: Path, cfg: dict, seed: int, args: dict) -> None:
    kind = args["kind"]
    M, report = fit_m(_orbits(root, kind, "orbits"), epochs=cfg["m_epochs"], lr=cfg["learning_rate"],
                      batch_size=cfg["batch_size"], seed=seed, eval_orbits=_orbits(root, kind, "eval"))
    save_m(root / "m" / kind, M, report)


def _train_sae(root: Path, cfg: dict, seed: int, args: dict) -> None:
    variant, k = args["variant"], args["k"]
    orbits = _orbits(root, cfg["sae_base"], "orbits")
    config = SaeTrainConfig(epochs=cfg["sae_epochs"], n_samples=orbits.shape[0], batch_size=cfg["batch_size"],
                            learning_rate=cfg["learning_rate"], seed=seed)
    sae = build_sae(variant, k, seed)
    train_sae(sae, orbits, config=config)
    save_sae(sae, root / "sae" / f"{variant}_k{k}", config)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


SAE_METRIC_COLUMNS = ["sae_variant", "K", "latent_l1", "splice_loss", "splice_loss_equivariant",
                      "invariance_ratio", "p_accuracy", "dead_fraction", "n_invariant", "n_equivariant", "n_dead"]
AGGREGATE_COLUMNS = ["representation", "sae_variant", "K", "trunc_len", "task_family", "mean_best_f1", "n_tasks"]


def _probe(root: Path, cfg: dict, seed: int, args: dict) -> None:
    base_kind = cfg["sae_base"]
    out = root / "probe"
    base = load_base(root / "base" / base_kind)
    M, _ = load_m(root / "m" / base_kind)

    # SAE evaluation on held-out orbits
    eval_orbits = _orbits(root, base_kind, "eval")
    eval_flat = eval_orbits.reshape(-1, eval_orbits.shape[2])
    _, eval_images, _ = ds.load_dataset(root / "data" / "eval")
    true_powers = np.tile(np.arange(ds.GROUP_ORDER), eval_orbits.shape[0])
    metric_rows, hist_rows = [], []
    for variant, k in args["sae_grid"]:
        sae = load_sae(root / "sae" / f"{variant}_k{k}")
        dead = dead_latents(sae, eval_flat)
        cls = classify_dictionary_features(sae.dictionary, M, alive=~dead)
        counts = cls.counts()
        row = [variant, k, latent_l1(sae, eval_flat), splice_loss(base, sae, eval_images, activations=eval_flat),
               None, None, None, float(dead.mean()), counts["invariant"], counts["equivariant"], counts["dead"]]
        if variant == "invariant":
            _, powers = equivariant_reconstruct(sae, M, eval_flat)
            row[4] = splice_loss(base, sae, eval_images, M=M, powers=powers, activations=eval_flat)
            row[5] = invariance_ratio(sae, eval_orbits)
            row[6] = float(np.mean(powers == true_powers))
        metric_rows.append(row)
        hist, edges = cls.histogram()
        hist_rows += [[variant, k, float(edges[i]), float(edges[i + 1]), int(hist[i])] for i in range(hist.size)]
    _write_csv(out / "sae_metrics.csv", SAE_METRIC_COLUMNS, metric_rows)
    _write_csv(out / "feature_similarity.csv", ["sae_variant", "K", "bin_lo", "bin_hi", "count"], hist_rows)

    # probing suite
    specs, _, _ = ds.load_dataset(root / "data" / "probe")
    tasks = ds.enumerate_tasks()
    labels = ds.label_matrix(specs, tasks)
    acts = etns.load(root / "acts" / base_kind / "probe.etns")
    train, test = orbit_split(len(specs) // ds.GROUP_ORDER, derive_seed(cfg["seed"], "probe", "split"))
    suite_seed = derive_seed(cfg["seed"], "probe")
    probes = tuple(cfg["probes"])
    results = run_task_suite([Representation("activations", features=acts)], labels, tasks, train, test,
                             L=None, seed=suite_seed, probes=probes).results
    encoded = {}
    for variant, k in args["probe_grid"]:
        sae = load_sae(root / "sae" / f"{variant}_k{k}")
        z = encode(sae, acts)
        powers = equivariant_reconstruct(sae, M, acts)[1] if variant == "invariant" else None
        encoded[(variant, k)] = (sae, z, powers)
    for L in cfg["trunc_lengths"]:
        reps = []
        for (variant, k), (sae, z, powers) in encoded.items():
            reps.append(Representation("latents_truncated", variant, k, latents=z))
            reps.append(Representation("reconstruction_truncated", variant, k, latents=z,
                                       decoder_weight=sae.dictionary, decoder_bias=sae.params["dec.bias"].data,
                                       M=M if powers is not None else None, powers=powers))
        results += run_task_suite(reps, labels, tasks, train, test, L=L, seed=suite_seed, probes=probes).results

    suite = SuiteOutput(results)
    (out / "results.csv").write_text(suite.to_csv())
    agg_rows = []
    groups: dict[tuple, dict[str, list[float]]] = {}
    for r in suite.best():
        key = (r.representation, r.sae_variant, r.K, r.trunc_len)
        fams = groups.setdefault(key, {f: [] for f in ds.FAMILIES + ("ALL",)})
        fams[r.task.family].append(r.f1)
        fams["ALL"].append(r.f1)
    for (rep, variant, k, L), fams in groups.items():
        for fam, vals in fams.items():
            agg_rows.append([rep, variant, k, L, fam, float(np.mean(vals)), len(vals)])
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, agg_rows)
    failures = [r for r in results if r.error]
    (out / "failures.json").write_text(json.dumps(
        [{"task": r.task.name, "representation": r.representation, "sae_variant": r.sae_variant,
          "probe": r.probe, "error": r.error} for r in failures], indent=1))


def _report(root: Path, cfg: dict, seed: int, args: dict) -> None:
    from .report import write_report

    write_report(root, cfg)


_BODIES = {
    "gen-data": _gen_data,
    "train-base": _train_base,
    "fit-m": _fit_m,
    "train-sae": _train_sae,
    "probe": _probe,
    "report": _report,
}


def _execute(root: str, stage: str, cfg: dict, seed: int, args: dict) -> float:
    start = time.perf_counter()
    _BODIES[stage](Path(root), cfg, seed, args)
    return time.perf_counter() - start


# -- orchestration ---------------------------------------------------------------------------


class Pipeline:
    """Plans stage jobs from a config and runs them with manifest-backed caching."""

    def __init__(self, config: ExperimentConfig, parallelism: int = 1):
        self.cfg = config
        self.root = config.out
        self.parallelism = max(1, int(parallelism))
        self.manifest = RunManifest.load(self.root)
        self.manifest.config = config.to_dict()

    # job planning
    def jobs(self, stage: str) -> list[Job]:
        c = self.cfg
        s = c.seed
        train_keys = ["batch_size", "learning_rate"]
        if stage == "gen-data":
            return [Job("gen-data", stage, ["data"], [], ["seed", "n_samples", "eval_orbits", "probe_orbits"],
                        derive_seed(s, stage))]
        if stage == "train-base":
            return [Job(f"train-base:{k}", stage, [f"base/{k}", f"acts/{k}"], ["gen-data"],
                        ["base_epochs", *train_keys], derive_seed(s, stage, k), {"kind": k}) for k in c.base_kinds]
        if stage == "fit-m":
            return [Job(f"fit-m:{k}", stage, [f"m/{k}"], [f"train-base:{k}"], ["m_epochs", *train_keys],
                        derive_seed(s, stage, k), {"kind": k}) for k in c.base_kinds]
        if stage == "train-sae":
            return [Job(f"train-sae:{v}:k{k}", stage, [f"sae/{v}_k{k}"], [f"train-base:{c.sae_base}"],
                        ["sae_epochs", "sae_base", *train_keys], derive_seed(s, stage, v, k), {"variant": v, "k": k})
                    for v, k in c.sae_pairs()]
        if stage == "probe":
            ups = [f"train-base:{c.sae_base}", f"fit-m:{c.sae_base}"] + [j.key for j in self.jobs("train-sae")]
            return [Job("probe", stage, ["probe"], ups, ["probe_grid", "trunc_lengths", "probes", "sae_grid"],
                        derive_seed(s, stage),
                        {"sae_grid": [list(p) for p in c.sae_pairs()], "probe_grid": [list(p) for p in c.probe_pairs()]})]
        if stage == "report":
            ups = ["probe"] + [f"fit-m:{k}" for k in c.base_kinds] + [f"train-base:{k}" for k in c.base_kinds]
            return [Job("report", stage, ["report"], ups, [], derive_seed(s, stage))]
        raise StageError(stage, f"unknown stage; expected one of {', '.join(STAGES)}")

    def _fingerprint(self, job: Job) -> str:
        h = hashlib.sha256()
        h.update(f"{job.key}|{job.seed}|{json.dumps(job.args, sort_keys=True)}".encode())
        h.update(self.cfg.digest(job.config_keys).encode())
        h.update(self.manifest.outputs_digest(job.upstream).encode())
        return h.hexdigest()

    def _check_upstream(self, job: Job) -> None:
        for up in job.upstream:
            rec = self.manifest.stages.get(up)
            missing = rec is None or any(not (self.root / rel).is_file() for rel in rec.outputs)
            if missing:
                up_stage = up.split(":")[0]
                raise StageDependencyError(
                    job.stage, f"{job.key} needs artifacts of {up}; run the '{up_stage}' stage first")

    def run_stage(self, stage: str) -> list[StageRecord]:
        return self.run_jobs(self.jobs(stage))

    def run_jobs(self, jobs: list[Job]) -> list[StageRecord]:
        """Run mutually independent jobs, concurrently when parallelism > 1."""
        for job in jobs:
            self._check_upstream(job)
        pending, records = [], []
        for job in jobs:
            fp = self._fingerprint(job)
            if self.manifest.is_fresh(job.key, fp):
                # the stored record keeps the timing of the run that produced the outputs
                old = self.manifest.stages[job.key]
                records.append(StageRecord(job.key, fp, job.seed, old.outputs, 0.0, cache_hit=True))
                log.info("%s: cache hit", job.key)
            else:
                pending.append((job, fp))
        for job, _ in pending:
            for rel in job.outputs:
                shutil.rmtree(self.root / rel, ignore_errors=True)
        self.root.mkdir(parents=True, exist_ok=True)
        cfg = self.cfg.to_dict()
        if self.parallelism > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=self.parallelism) as pool:
                futures = [(job, fp, pool.submit(_execute, str(self.root), job.stage, cfg, job.seed, job.args))
                           for job, fp in pending]
                timed = [(job, fp, self._wait(job, fut)) for job, fp, fut in futures]
        else:
            timed = [(job, fp, self._run_inline(job, cfg)) for job, fp in pending]
        for job, fp, seconds in timed:
            outputs = {}
            for rel in job.outputs:
                path = self.root / rel
                if path.exists():
                    outputs.update(tree_checksums(path, self.root))
            rec = StageRecord(job.key, fp, job.seed, outputs, round(seconds, 3))
            self.manifest.record(rec)
            records.append(rec)
            log.info("%s: done in %.1fs", job.key, seconds)
        return records

    def _run_inline(self, job: Job, cfg: dict) -> float:
        log.info("%s: running", job.key)
        try:
            return _execute(str(self.root), job.stage, cfg, job.seed, job.args)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(job.stage, f"{job.key} failed: {exc}") from exc

    @staticmethod
    def _wait(job: Job, fut) -> float:
        try:
            return fut.result()
        except Exception as exc:
            raise StageError(job.stage, f"{job.key} failed: {exc}") from exc

    def run_all(self, order: tuple[str, ...] = STAGES) -> list[StageRecord]:
        """Run stages in ``order``; fit-m and train-sae share one batch when adjacent."""
        records: list[StageRecord] = []
        i = 0
        while i < len(order):
            batch = [order[i]]
            if i + 1 < len(order) and {order[i], order[i + 1]} == {"fit-m", "train-sae"}:
                batch.append(order[i + 1])
            records += self.run_jobs([j for stage in batch for j in self.jobs(stage)])
            i += len(batch)
        return records
