"""Run orchestration: prepare -> optimize -> poison -> train -> evaluate -> defend."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import __version__
from .analysis import rank_pairs as rank_class_pairs
from .analysis import surrogate_centers
from .config import ExperimentConfig, expand_sweep, is_valid, validate_config
from .data import DatasetSplit, SyntheticConfig, load_dataset, make_synthetic, split
from .defense import abl_defense, beatrix_detect, detection_set, finetune_defense, prune_defense, strip_detect, teco_detect
from .metrics import EvalReport, evaluate, jsonable
from .model import TrainConfig, predict_batch, reference_tiny_model, save_checkpoint, load_checkpoint, train
from .optimize import JsonlLog, search
from .poison import PoisonedSet, poison_all, poison_split
from .trigger import TriggerSpec

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BADSEG_OUTPUT_ROOT"
RECORD = "record.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@dataclass
class RunRecord:
    config: dict
    seed: int
    version: str = __version__
    status: str = "running"
    stages: list[dict] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    error: str | None = None

    def save(self, run_dir: Path) -> None:
        for name, rel in self.artifacts.items():
            if not (run_dir / rel).exists():
                raise FileNotFoundError(f"artifact {name} missing: {rel}")
        (run_dir / RECORD).write_text(json.dumps(jsonable(asdict(self)), indent=2, sort_keys=True))

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        path = Path(run_dir) / RECORD
        try:
            data = json.loads(path.read_text())
            return cls(**data)
        except FileNotFoundError:
            raise
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValueError(f"corrupt run record {path}: {exc}") from exc


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_run_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        p = Path(config.output_dir)
        return p if p.is_absolute() else output_root() / p
    return output_root() / config.name


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data


def load_data(config: ExperimentConfig):
    """(taxonomy, train, test, aux_pool) for the configured dataset."""
    ds = config.dataset
    taxonomy = ds.taxonomy()
    if ds.kind == "synthetic":
        common = dict(height=ds.height, width=ds.width, num_classes=ds.num_classes)
        train = make_synthetic(SyntheticConfig(ds.n_train, seed=ds.seed, id_prefix="train", **common))
        test = make_synthetic(SyntheticConfig(ds.n_test, seed=ds.seed + 1, id_prefix="test", **common))
        aux = make_synthetic(SyntheticConfig(ds.n_aux, seed=ds.seed + 2, id_prefix="aux", **common))
    else:
        root = Path(ds.root)
        train = load_dataset(root / "train", taxonomy)
        test = load_dataset(root / "test", taxonomy)
        aux = load_dataset(root / "aux", taxonomy) if (root / "aux").exists() else []
    if not train or not test:
        raise ValueError("train and test sets must be non-empty")
    return taxonomy, train, test, aux


class Run:
    """State shared between stages of one experiment."""

    def __init__(self, config: ExperimentConfig, run_dir: Path | None = None):
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else resolve_run_dir(config)
        self.record = RunRecord(config=config.to_dict(), seed=config.seed)
        self.taxonomy = None
        self.attack = None
        self.train_set = self.test_set = self.aux_pool = None
        self.split: DatasetSplit | None = None
        self.surrogate = None
        self.trigger: TriggerSpec | None = None
        self.poisoned: PoisonedSet | None = None
        self.poisoned_test = None
        self.model = None
        self.report: EvalReport | None = None

    # ---- bookkeeping

    def _artifact(self, name: str, rel: str) -> Path:
        self.record.artifacts[name] = rel
        return self.run_dir / rel

    def _stage(self, name: str, fn: Callable[[], None]) -> None:
        start = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            self.record.stages.append({"name": name, "status": "failed", "seconds": time.perf_counter() - start})
            self.record.status = "failed"
            self.record.error = f"[{name}] {type(exc).__name__}: {exc}"
            # drop artifacts the failed stage registered but never wrote
            self.record.artifacts = {k: v for k, v in self.record.artifacts.items() if (self.run_dir / v).exists()}
            self.record.save(self.run_dir)
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        self.record.stages.append({"name": name, "status": "ok", "seconds": time.perf_counter() - start})
        self.record.save(self.run_dir)

    # ---- stages

    def prepare(self) -> None:
        cfg = self.config
        self.taxonomy, self.train_set, self.test_set, self.aux_pool = load_data(cfg)
        self.attack = cfg.attack_spec(self.taxonomy)
        self.attack.check(self.taxonomy)
        self.split = split(self.train_set, cfg.training.poison_rate, cfg.training.aux_fraction, cfg.seed, self.aux_pool)
        self.taxonomy.save(self._artifact("taxonomy", "taxonomy.yaml"))
        _write_json(
            self._artifact("split", "split.json"),
            {
                "triggered_pool": [s.id for s in self.split.triggered_pool],
                "auxiliary": [s.id for s in self.split.auxiliary],
                "n_target": len(self.split.target),
            },
        )

    def train_surrogate(self) -> None:
        cfg = self.config.surrogate
        data = self.split.surrogate
        if not data:
            raise ValueError("surrogate dataset is empty")
        self.surrogate = reference_tiny_model(self.taxonomy.num_classes, cfg.feature_channels, self.config.seed + 1)
        tc = TrainConfig(epochs=cfg.epochs, step_size=cfg.step_size, batch_size=cfg.batch_size, seed=self.config.seed + 1)
        train(self.surrogate, data, tc)
        save_checkpoint(self.surrogate, self._artifact("surrogate", "surrogate.pt"), self.taxonomy, tc)

    def analyze(self) -> None:
        centers = surrogate_centers(self.surrogate, self.split.surrogate, self.taxonomy.num_classes)
        ranking = rank_class_pairs(centers, self.taxonomy)
        self._artifact("ranking", "ranking.tsv").write_text(ranking.to_table(self.taxonomy))
        _write_json(
            self._artifact("ranking_json", "ranking.json"),
            {
                "pairs": [
                    {"class_i": self.taxonomy.classes[i].name, "class_j": self.taxonomy.classes[j].name, "distance": d, "suitable": v}
                    for i, j, d, v in ranking.ranked_pairs
                ],
                "distance_matrix": ranking.distance_matrix,
            },
        )

    def optimize(self) -> None:
        search_cfg, color = self.config.trigger.search_config()
        with JsonlLog(self._artifact("search_log", "search_log.jsonl")) as sink:
            self.trigger, _ = search(self.surrogate, self.split.surrogate, self.attack, search_cfg, color=color, on_step=sink)

    def write_trigger(self) -> None:
        if self.trigger is None:
            self.trigger = self.config.trigger.spec()
        self._artifact("trigger", "trigger.yaml").write_text(yaml.safe_dump({"fixed": self.trigger.to_dict()}, sort_keys=False))

    def poison(self) -> None:
        self.poisoned = poison_split(self.split, self.attack, self.trigger, self.config.seed)
        if self.config.training.poison_rate > 0 and self.poisoned.n_poisoned == 0:
            raise ValueError("no training sample could be poisoned (victim class never present)")
        _write_json(
            self._artifact("poisoned_manifest", "poisoned_manifest.json"),
            {"samples": self.poisoned.manifest(), "skipped": self.poisoned.skipped, "n_poisoned": self.poisoned.n_poisoned},
        )

    def train(self) -> None:
        cfg = self.config.training
        self.model = reference_tiny_model(self.taxonomy.num_classes, cfg.feature_channels, self.config.seed)
        tc = self.train_config()
        history = train(self.model, self.poisoned.samples, tc)
        save_checkpoint(self.model, self._artifact("checkpoint", "checkpoint.pt"), self.taxonomy, tc)
        _write_json(self._artifact("train_history", "train_history.json"), {"loss": history})

    def train_config(self) -> TrainConfig:
        cfg = self.config.training
        return TrainConfig(cfg.epochs, cfg.step_size, cfg.batch_size, self.config.seed, cfg.hflip)

    def evaluator(self, stealth_limit: int = 0):
        if self.poisoned_test is None:
            self.poisoned_test = poison_all(self.test_set, self.attack, self.trigger, self.config.seed)
        victim = self.attack.victim if self.attack.object_victim else None
        return partial(
            evaluate,
            clean_samples=self.test_set,
            poisoned_samples=self.poisoned_test,
            target_class=self.attack.target,
            num_classes=self.taxonomy.num_classes,
            stealth_limit=stealth_limit,
            victim_class=victim,
        )

    def evaluate(self) -> None:
        self.report = self.evaluator(self.config.evaluation.stealth_samples)(self.model)
        self._artifact("eval_report", "eval_report.json").write_text(self.report.to_json() + "\n")
        n = min(self.config.evaluation.overlays, len(self.poisoned_test))
        if n:
            chosen = self.poisoned_test[:n]
            clean = {s.id: s for s in self.test_set}
            preds, _ = predict_batch(self.model, np.stack([p.image for p in chosen]))
            with open(self._artifact("examples", "examples.npz"), "wb") as fh:
                np.savez_compressed(
                    fh,
                    clean=np.stack([clean[p.id].image for p in chosen]),
                    poisoned=np.stack([p.image for p in chosen]),
                    target=np.stack([p.label for p in chosen]),
                    prediction=preds,
                    ids=np.array([p.id for p in chosen]),
                )

    def defend(self, entries=None) -> None:
        entries = self.config.defenses if entries is None else entries
        for i, d in enumerate(entries):
            tag = f"{d['name']}_{i}"
            result = run_defense(self, d)
            self._artifact(f"defense_{tag}", f"defense_{tag}.json").write_text(result["report"].to_json() + "\n")
            for kind, text in result.get("tables", {}).items():
                self._artifact(f"{kind}_{tag}", f"{kind}_{tag}.tsv").write_text(text)

    # ---- driver

    def execute(self) -> RunRecord:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.yaml").write_text(self.config.dump())
        self.record.artifacts["config"] = "config.yaml"
        cfg = self.config
        self._stage("prepare", self.prepare)
        if cfg.trigger.optimize is not None or cfg.evaluation.rank_pairs:
            self._stage("surrogate", self.train_surrogate)
        if cfg.evaluation.rank_pairs:
            self._stage("analysis", self.analyze)
        if cfg.trigger.optimize is not None:
            self._stage("optimize", self.optimize)
        self._stage("trigger", self.write_trigger)
        self._stage("poison", self.poison)
        self._stage("train", self.train)
        self._stage("evaluate", self.evaluate)
        if cfg.defenses:
            self._stage("defend", self.defend)
        self.record.status = "complete"
        self.record.save(self.run_dir)
        return self.record

    @classmethod
    def resume(cls, run_dir) -> "Run":
        """Rebuild data, trigger and model of a finished run from its directory."""
        run_dir = Path(run_dir)
        record = RunRecord.load(run_dir)
        config = ExperimentConfig.from_dict(record.config)
        run = cls(config, run_dir)
        run.record = record
        run.taxonomy, run.train_set, run.test_set, run.aux_pool = load_data(config)
        run.attack = config.attack_spec(run.taxonomy)
        run.split = split(run.train_set, config.training.poison_rate, config.training.aux_fraction, config.seed, run.aux_pool)
        run.trigger = TriggerSpec.from_dict(yaml.safe_load((run_dir / "trigger.yaml").read_text())["fixed"])
        run.poisoned = poison_split(run.split, run.attack, run.trigger, config.seed)
        run.model, _ = load_checkpoint(run_dir / "checkpoint.pt")
        run.report = EvalReport.from_dict(json.loads((run_dir / "eval_report.json").read_text()))
        return run


def run_defense(run: Run, d: dict) -> dict:
    """Run one configured defense against a trained run; returns report and score tables."""
    name = d["name"]
    seed = run.config.seed
    k = run.taxonomy.num_classes
    evaluate_fn = run.evaluator(0)
    clean_pool = run.split.clean
    if name == "finetune":
        report, _ = finetune_defense(
            run.model,
            clean_pool,
            d["clean_fraction"],
            d["epochs"],
            evaluate_fn,
            base_step_size=run.config.training.step_size,
            reference_size=len(run.split.target),
            batch_size=run.config.training.batch_size,
            seed=seed,
        )
        return {"report": report}
    if name == "prune":
        report, _ = prune_defense(run.model, clean_pool[: d["n_probe"]], d["fraction"], evaluate_fn)
        return {"report": report}
    if name == "abl":
        feature_channels = run.config.training.feature_channels
        report, _, table = abl_defense(
            run.poisoned.samples,
            lambda: reference_tiny_model(k, feature_channels, seed),
            d["isolation_rate"],
            evaluate_fn,
            run.train_config(),
            brief_epochs=d["brief_epochs"],
            unlearn_epochs=d["unlearn_epochs"],
            unlearn_step_size=d["unlearn_step_size"],
            poisoned_flags=run.poisoned.poisoned,
            asr_before=run.report.asr if run.report is not None else None,
        )
        rows = ["id\tlabel\tloss\tisolated"]
        for sid, loss, p, iso in zip(table["id"], table["loss"], table["poisoned"], table["isolated"]):
            rows.append(f"{sid}\t{'poisoned' if p else 'clean'}\t{loss:.10g}\t{int(iso)}")
        return {"report": report, "tables": {"losses": "\n".join(rows) + "\n"}}

    dset = detection_set(run.test_set, run.attack, run.trigger, d["n_per_class"], seed)
    reference = np.stack([s.image for s in clean_pool[: max(2 * d["n_per_class"], 20)]])
    if name == "strip":
        report = strip_detect(
            run.model,
            dset.images,
            dset.labels,
            np.stack([s.image for s in clean_pool]),
            d["n_perturbations"],
            d["fpr"],
            clean_reference=reference,
            ids=dset.ids,
            seed=seed,
            aggregate=d["aggregate"],
        )
    elif name == "teco":
        report = teco_detect(
            run.model,
            dset.images,
            dset.labels,
            k,
            miou_break_threshold=d["miou_break_threshold"],
            n_std=d["n_std"],
            clean_reference=reference[: d["n_per_class"]],
            ids=dset.ids,
            seed=seed,
        )
    elif name == "beatrix":
        selected = d["selected_class"]
        report = beatrix_detect(
            run.model,
            dset.images,
            dset.labels,
            reference,
            k,
            grouping=d["grouping"],
            selected_class=None if selected is None else run.taxonomy.resolve(selected),
            orders=tuple(d["orders"]),
            n_mad=d["n_mad"],
            ids=dset.ids,
        )
    else:
        raise ValueError(f"unknown defense {name!r}")
    return {"report": report, "tables": {"scores": report.score_table()}}


# --------------------------------------------------------------------------
# entry points


def run(config: ExperimentConfig, run_dir=None) -> RunRecord:
    problems = validate_config(config)
    if not is_valid(problems):
        raise StageError("validate", "; ".join(str(p) for p in problems if p.level == "error"))
    if config.sweep:
        raise StageError("validate", "config has a sweep section; use sweep()")
    return Run(config, run_dir).execute()


def defend(run_dir, entries=None) -> RunRecord:
    r = Run.resume(run_dir)
    try:
        r.defend(entries)
    except Exception as exc:
        raise StageError("defend", f"{type(exc).__name__}: {exc}") from exc
    r.record.save(r.run_dir)
    return r.record


@dataclass
class SweepResult:
    run_dir: Path
    children: list[tuple[dict, Path]]
    table: str


def sweep(config: ExperimentConfig, run_dir=None) -> SweepResult:
    """Run every child of the sweep and write an aggregate ASR/PBA/CBA table."""
    root = Path(run_dir) if run_dir is not None else resolve_run_dir(config)
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.yaml").write_text(config.dump())
    keys = list(config.sweep)
    rows = ["\t".join(keys + ["asr", "pba", "cba", "run_dir"])]
    children = []
    for assignment, child in expand_sweep(config):
        child_dir = root / child.name
        child.output_dir = str(child_dir.resolve())
        run(child, child_dir)
        report = json.loads((child_dir / "eval_report.json").read_text())
        values = [str(assignment[k]) for k in keys]
        rows.append("\t".join(values + [f"{report['asr']:.4f}", f"{report['pba']:.4f}", f"{report['cba']:.4f}", child.name]))
        children.append((assignment, child_dir))
    table = "\n".join(rows) + "\n"
    (root / "summary.tsv").write_text(table)
    return SweepResult(root, children, table)


def rank_pairs(config: ExperimentConfig, run_dir=None) -> Path:
    r = Run(config, run_dir)
    r.run_dir.mkdir(parents=True, exist_ok=True)
    r._stage("prepare", r.prepare)
    r._stage("surrogate", r.train_surrogate)
    r._stage("analysis", r.analyze)
    return r.run_dir / "ranking.tsv"


def optimize_trigger(config: ExperimentConfig, run_dir=None) -> TriggerSpec:
    if config.trigger.optimize is None:
        raise StageError("validate", "config has a fixed trigger; nothing to optimize")
    r = Run(config, run_dir)
    r.run_dir.mkdir(parents=True, exist_ok=True)
    r._stage("prepare", r.prepare)
    r._stage("surrogate", r.train_surrogate)
    r._stage("optimize", r.optimize)
    r._stage("trigger", r.write_trigger)
    return r.trigger
