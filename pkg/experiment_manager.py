"""
Experiment Manager - the work behind every CLI command
Each command returns a result dict ("success", "error", "developer_hint",
"elapsed_seconds", "resources", ...) instead of raising, so the host can print
it and pick the exit code
"""

import csv
import json
import os
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import psutil

from attacks import AttackError, AttackMethod, run_attack
from datasets import (Dataset, DatasetError, IdxFormatError, generate_blobs, generate_rings,
                      ingest_idx, load_dataset, save_dataset, write_container)
from evaluation import (EvaluationError, build_transfer_matrix, compare_methods, report,
                        run_holdout_table)
from experiment_config import ConfigError, ExperimentConfig, ModelSpec
from invariants import InvariantGuard, InvariantViolation
from models import (CheckpointError, MlpModel, ModelError, accuracy, load_checkpoint, predict,
                    save_checkpoint, train_sgd)
from optim_ref import OptimizerError, OptimizerParams, run_descent
from tensor_core import LabError

VERSION = "1.1.0"

# Developer hints per failure family, most specific first
_HINTS = [
    (InvariantViolation, "An attack iterate broke its contract; rerun with --verbose and report the config"),
    (CheckpointError, "Run 'train' to (re)create the checkpoints named in the config"),
    (IdxFormatError, "Pass the IDX image file (magic 0x00000803) and label file (magic 0x00000801)"),
    (DatasetError, "Run 'gen-data' or point dataset.path at a valid dataset file"),
    (ConfigError, "Check the config file and flag values"),
    (AttackError, "Check the attack section of the config"),
    (EvaluationError, "Matrix needs >= 2 models, hold-out >= 3, and at least one method"),
    (ModelError, "Lower the learning rate or check the model roster"),
    (OptimizerError, "Check the descent objective and optimizer parameters"),
]


class ExperimentManager:
    """
    Runs dataset, training, attack and evaluation commands for one resolved
    ExperimentConfig. All file outputs embed that config.
    """

    def __init__(self, config: ExperimentConfig, debug_log: Callable[[str], None]):
        self.config = config
        self.debug_log = debug_log
        self.guard = InvariantGuard()

    def _format_memory(self, memory_mb: float) -> str:
        """Format memory in human-readable units"""
        if memory_mb < 1024:
            return f"{memory_mb:.1f} MB"
        return f"{memory_mb / 1024:.2f} GB"

    def _resources(self) -> Dict[str, Any]:
        try:
            rss_mb = psutil.Process(os.getpid()).memory_info().rss / (1024 * 1024)
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            return {"memory_mb": None, "memory_human": "unknown"}
        return {"memory_mb": round(rss_mb, 1), "memory_human": self._format_memory(rss_mb),
                "cpu_count": psutil.cpu_count(logical=False) or 1}

    def _run(self, command: str, work: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
        start_time = time.time()
        self.debug_log(f"{command}: starting")
        try:
            payload = work()
            result = {"success": True, "command": command}
            result.update(payload)
        except LabError as e:
            self.debug_log(f"{command}: failed with {type(e).__name__}: {e}")
            result = {"success": False, "command": command, "error": str(e),
                      "error_type": type(e).__name__}
            for exc_type, hint in _HINTS:
                if isinstance(e, exc_type):
                    result["developer_hint"] = hint
                    break
            if isinstance(e, InvariantViolation):
                result["invariant"] = e.name
        result["elapsed_seconds"] = time.time() - start_time
        result["resources"] = self._resources()
        return result

    # -- data -----------------------------------------------------------------

    def _generate(self, seed: int) -> Dataset:
        spec = self.config.dataset
        if spec.kind == "rings":
            return generate_rings(spec.n_examples, spec.n_classes, spec.noise, seed)
        return generate_blobs(spec.n_examples, spec.n_features, spec.n_classes,
                              spec.separation, spec.noise, seed)

    def _dataset(self) -> Dataset:
        path = self.config.dataset_path()
        if path.exists():
            return load_dataset(path)
        if self.config.dataset.kind == "file":
            raise DatasetError(f"Dataset file not found: {path}")
        self.debug_log(f"{path} missing; generating dataset in memory")
        return self._generate(self.config.seed)

    def _splits(self, dataset: Dataset):
        return dataset.split(self.config.dataset.train_fraction, self.config.seed)

    def _eval_split(self, dataset: Dataset) -> Dataset:
        _, test = self._splits(dataset)
        if self.config.max_examples:
            test = test.head(self.config.max_examples)
        return test

    def gen_data(self, out: Optional[str] = None) -> Dict[str, Any]:
        def work():
            dataset = self._generate(self.config.seed)
            path = save_dataset(dataset, out or self.config.dataset_path(), self.config.to_dict())
            counts = np.bincount(dataset.labels, minlength=dataset.num_classes).tolist()
            return {"path": str(path), "n_examples": len(dataset), "input_shape": list(dataset.input_shape),
                    "class_counts": counts}
        return self._run("gen-data", work)

    def ingest_idx(self, images: str, labels: str, num_classes: int = 10,
                   out: Optional[str] = None) -> Dict[str, Any]:
        def work():
            dataset = ingest_idx(images, labels, num_classes)
            path = save_dataset(dataset, out or self.config.dataset_path(), self.config.to_dict())
            return {"path": str(path), "n_examples": len(dataset), "input_shape": list(dataset.input_shape)}
        return self._run("ingest-idx", work)

    # -- models ---------------------------------------------------------------

    def _train_one(self, spec: ModelSpec, train: Dataset, seed_offset: int) -> MlpModel:
        seed = seed_offset + spec.seed
        model = MlpModel.initialize(train.input_shape, spec.hidden, train.num_classes, seed)
        return train_sgd(model, train.examples(), spec.epochs, spec.lr, seed, self.debug_log)

    def _load_models(self, names: Optional[Sequence[str]] = None) -> Dict[str, MlpModel]:
        specs = self.config.models if names is None else [self.config.model(n) for n in names]
        self.config.validate_paths(require_checkpoints=True)
        return {spec.name: load_checkpoint(self.config.checkpoint_path(spec)) for spec in specs}

    def train(self, names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        def work():
            train, test = self._splits(self._dataset())
            specs = self.config.models if not names else [self.config.model(n) for n in names]
            trained = []
            for spec in specs:
                model = self._train_one(spec, train, self.config.seed)
                path = save_checkpoint(model, self.config.checkpoint_path(spec))
                entry = {"name": spec.name, "checkpoint": str(path),
                         "train_accuracy": accuracy(model, train.examples()),
                         "test_accuracy": accuracy(model, test.examples())}
                self.debug_log(f"trained {entry}")
                trained.append(entry)
            return {"models": trained}
        return self._run("train", work)

    # -- attacks and evaluation -----------------------------------------------

    def attack(self, model_name: Optional[str] = None) -> Dict[str, Any]:
        def work():
            name = model_name or self.config.models[0].name
            oracle = self._load_models([name])[name]
            examples = self._eval_split(self._dataset()).examples()
            if not examples:
                raise EvaluationError("No examples left to attack")
            cfg = self.config.attack
            out_dir = Path(self.config.output_dir)
            rows, adversarials = [], []
            for i, ex in enumerate(examples):
                clean_pred = predict(oracle, ex.features)
                result = run_attack(oracle, ex, cfg, self.guard)
                adversarials.append(result.x_adv)
                rows.append([i, ex.label, clean_pred, result.predicted_label, int(result.success),
                             result.iterations_used, repr(result.final_loss), repr(result.linf_distance)])
            stem = f"attack-{cfg.method.value}-{name}"
            dump = write_container(
                out_dir / f"{stem}.bin",
                {"kind": "adversarials", "model": name, "config": self.config.to_dict()},
                {"x": np.stack([ex.features for ex in examples]), "x_adv": np.stack(adversarials),
                 "labels": np.array([ex.label for ex in examples], dtype=np.int64),
                 "predicted": np.array([r[3] for r in rows], dtype=np.int64)})
            csv_path = out_dir / f"{stem}.csv"
            with open(csv_path, "w", newline="") as f:
                f.write("# config: " + json.dumps(self.config.to_dict(), sort_keys=True) + "\n")
                writer = csv.writer(f)
                writer.writerow(["index", "label", "clean_prediction", "adversarial_prediction", "success",
                                 "iterations_used", "final_loss", "linf_distance"])
                writer.writerows(rows)
            return {"model": name, "method": cfg.method.value, "n_examples": len(rows),
                    "success_rate": sum(r[4] for r in rows) / len(rows),
                    "max_linf_distance": max(float(r[7]) for r in rows),
                    "invariant_checks": self.guard.checks,
                    "dump": str(dump), "report": str(csv_path)}
        return self._run("attack", work)

    def matrix(self) -> Dict[str, Any]:
        def work():
            models = self._load_models()
            dataset = self._eval_split(self._dataset())
            result = build_transfer_matrix(models, self.config.methods, dataset, self.config.attack,
                                           self.config.seed, self.config.workers, self.debug_log)
            result.config["experiment"] = self.config.to_dict()
            out = Path(self.config.output_dir)
            return {"csv": str(report(result, "csv", out / "transfer_matrix.csv")),
                    "json": str(report(result, "json", out / "transfer_matrix.json")),
                    "n_examples": result.n_examples,
                    "generation_rates": {m: result.generation_rates(m) for m in result.methods}}
        return self._run("matrix", work)

    def holdout(self) -> Dict[str, Any]:
        def work():
            models = self._load_models()
            dataset = self._eval_split(self._dataset())
            table = run_holdout_table(models, self.config.methods, dataset, self.config.attack,
                                      self.config.seed, self.config.ensemble_weights or None,
                                      self.config.workers, self.debug_log)
            table.config["experiment"] = self.config.to_dict()
            out = Path(self.config.output_dir)
            return {"csv": str(report(table, "csv", out / "holdout_table.csv")),
                    "json": str(report(table, "json", out / "holdout_table.json")),
                    "holdout_avg": {m: table.average("holdout", m) for m in table.methods},
                    "ensemble_avg": {m: table.average("ensemble", m) for m in table.methods}}
        return self._run("holdout", work)

    def sweep(self) -> Dict[str, Any]:
        """Retrain the roster per sweep seed, build a hold-out table each time, compare methods"""
        def work():
            tables = []
            for seed in self.config.sweep_seeds:
                dataset = self._generate(seed) if self.config.dataset.kind != "file" else self._dataset()
                train, test = dataset.split(self.config.dataset.train_fraction, seed)
                if self.config.max_examples:
                    test = test.head(self.config.max_examples)
                models = {spec.name: self._train_one(spec, train, seed) for spec in self.config.models}
                tables.append(run_holdout_table(models, self.config.methods, test, self.config.attack,
                                                seed, self.config.ensemble_weights or None,
                                                self.config.workers, self.debug_log))
            methods = tables[0].methods
            challenger = AttackMethod.ABFGSM.value if AttackMethod.ABFGSM.value in methods else methods[-1]
            baseline = AttackMethod.IFGSM.value if AttackMethod.IFGSM.value in methods else methods[0]
            trend = compare_methods(tables, challenger, baseline)
            out = Path(self.config.output_dir) / "seed_sweep.json"
            out.parent.mkdir(parents=True, exist_ok=True)
            payload = {"config": self.config.to_dict(), "trend": asdict(trend),
                       "tables": [t.to_dict() for t in tables]}
            out.write_text(json.dumps(payload, indent=2, sort_keys=True))
            return {"json": str(out), "method_means": trend.method_means, "wins": trend.wins,
                    "trend_holds": trend.trend_holds}
        return self._run("sweep", work)

    def descent(self, objective: str, variant: str, steps: int, lr: float,
                theta0: List[float], amsgrad: bool = False) -> Dict[str, Any]:
        def work():
            params = OptimizerParams(lr=lr, variant=variant, amsgrad=amsgrad)
            trajectory = run_descent(objective, params, steps, theta0)
            path = trajectory.to_csv(Path(self.config.output_dir) / f"descent-{objective}-{variant}.csv")
            return {"csv": str(path), "final_theta": trajectory.final.theta.tolist(),
                    "final_loss": trajectory.final.loss}
        return self._run("descent", work)

    def status(self) -> Dict[str, Any]:
        def work():
            checkpoints = {m.name: self.config.checkpoint_path(m).exists() for m in self.config.models}
            return {"version": VERSION, "dataset": str(self.config.dataset_path()),
                    "dataset_present": self.config.dataset_path().exists(),
                    "checkpoints": checkpoints, "methods": self.config.methods}
        return self._run("status", work)
