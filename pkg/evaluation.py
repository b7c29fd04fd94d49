"""
Evaluation - white-box / black-box success rates at desk scale
Transfer matrices (source x target per method), ensemble hold-out runs and
their table, seed-sweep trend summaries, and CSV/JSON reports.
Only examples every participating model classifies correctly are attacked,
so a success is always an attack-induced flip.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil

from attacks import AttackConfig, AttackMethod, AttackResult, run_attack
from datasets import Dataset
from invariants import InvariantGuard
from models import EnsembleModel, GradientOracle, LabeledExample, predict
from tensor_core import LabError, Tensor

PathLike = Union[str, Path]

FILTERING_NOTE = "attacked only examples every participating model classifies correctly"


class EvaluationError(LabError):
    """Invalid evaluation setup (too few models, empty inputs, shape mismatch)"""


def _noop_log(msg: str):
    pass


def default_workers() -> int:
    """Physical cores, falling back to 1"""
    return psutil.cpu_count(logical=False) or 1


def success_rate(oracle: GradientOracle, adversarials: Sequence[Tuple[Tensor, int]]) -> float:
    if not adversarials:
        raise EvaluationError("success_rate needs at least one adversarial example")
    fooled = sum(1 for x_adv, label in adversarials if predict(oracle, x_adv) != int(label))
    return fooled / len(adversarials)


def _check_shapes(models: Dict[str, GradientOracle], dataset: Dataset):
    for name, model in models.items():
        if tuple(model.input_shape) != dataset.input_shape:
            raise EvaluationError(f"Model '{name}' expects input {tuple(model.input_shape)} "
                                  f"but the dataset provides {dataset.input_shape}")
        if model.num_classes != dataset.num_classes:
            raise EvaluationError(f"Model '{name}' has {model.num_classes} classes, dataset {dataset.num_classes}")


def clean_correct_subset(models: Sequence[GradientOracle], dataset: Dataset) -> Dataset:
    keep = [i for i in range(len(dataset))
            if all(predict(m, dataset.features[i]) == int(dataset.labels[i]) for m in models)]
    return dataset.subset(keep)


def resolve_workers(workers: int) -> int:
    """0 (or less) picks one worker per physical core"""
    return default_workers() if workers <= 0 else workers


def generate_adversarials(oracle: GradientOracle, examples: Sequence[LabeledExample], cfg: AttackConfig,
                          workers: int = 1, guard: Optional[InvariantGuard] = None) -> List[AttackResult]:
    """
    Attack every example; results keep the input order whatever the worker count.
    Each threaded run checks its iterates with its own guard; counts are merged into `guard`.
    """
    guard = guard or InvariantGuard()
    workers = resolve_workers(workers)
    if workers == 1:
        return [run_attack(oracle, ex, cfg, guard) for ex in examples]

    def attack_one(ex: LabeledExample) -> Tuple[AttackResult, InvariantGuard]:
        local = InvariantGuard(guard.tolerance)
        return run_attack(oracle, ex, cfg, local), local

    with ThreadPoolExecutor(max_workers=workers) as executor:
        runs = list(executor.map(attack_one, examples))
    for _, local in runs:
        guard.merge(local)
    return [result for result, _ in runs]


def _method_names(methods: Sequence[Union[str, AttackMethod]]) -> List[AttackMethod]:
    if not methods:
        raise EvaluationError("At least one attack method is required")
    return [AttackMethod.parse(m) for m in methods]


@dataclass
class TransferMatrix:
    source_models: List[str]
    target_models: List[str]
    methods: List[str]
    rates: List[List[List[float]]]  # [method][source][target]
    n_examples: int
    eps_ball: float
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)

    def rate(self, method: str, source: str, target: str) -> float:
        return self.rates[self.methods.index(AttackMethod.parse(method).value)][
            self.source_models.index(source)][self.target_models.index(target)]

    def generation_rates(self, method: str) -> Dict[str, float]:
        """White-box (diagonal) entries for one method"""
        return {s: self.rate(method, s, s) for s in self.source_models if s in self.target_models}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TransferMatrix":
        return cls(**d)


def build_transfer_matrix(models: Dict[str, GradientOracle], methods: Sequence[Union[str, AttackMethod]],
                          dataset: Dataset, cfg: AttackConfig, seed: int = 0, workers: int = 1,
                          debug_log: Callable[[str], None] = _noop_log) -> TransferMatrix:
    """For every (method, source) craft adversarials on the source and score them on every target"""
    if len(models) < 2:
        raise EvaluationError(f"A transfer matrix needs at least 2 models, got {len(models)}")
    method_list = _method_names(methods)
    _check_shapes(models, dataset)
    names = list(models)
    subset = clean_correct_subset(list(models.values()), dataset)
    if len(subset) == 0:
        raise EvaluationError("No example is classified correctly by every model")
    examples = subset.examples()
    debug_log(f"transfer matrix: {len(examples)}/{len(dataset)} clean-correct examples, "
              f"{len(method_list)} methods x {len(names)} models")
    guard = InvariantGuard()
    rates = []
    for method in method_list:
        method_cfg = replace(cfg, method=method, record_trace=False)
        per_source = []
        for source in names:
            results = generate_adversarials(models[source], examples, method_cfg, workers, guard)
            adversarials = [(r.x_adv, r.true_label) for r in results]
            row = [success_rate(models[target], adversarials) for target in names]
            debug_log(f"  {method.display_name} on {source}: {row}")
            per_source.append(row)
        rates.append(per_source)
    return TransferMatrix(
        source_models=names, target_models=list(names), methods=[m.value for m in method_list],
        rates=rates, n_examples=len(examples), eps_ball=cfg.eps_ball, seed=seed,
        config={"attack": cfg.to_dict(), "filtering": FILTERING_NOTE, "dataset_size": len(dataset)},
    )


@dataclass
class HoldoutSpec:
    all_models: List[str]
    held_out: str
    ensemble_weights: Optional[List[float]] = None

    def __post_init__(self):
        if self.held_out not in self.all_models:
            raise EvaluationError(f"Held-out model '{self.held_out}' is not in {self.all_models}")
        if len(self.members) < 2:
            raise EvaluationError(f"The ensemble needs at least 2 models after holding out "
                                  f"'{self.held_out}', got {len(self.members)}")
        if self.ensemble_weights is not None and len(self.ensemble_weights) != len(self.members):
            raise EvaluationError(f"{len(self.members)} ensemble members but "
                                  f"{len(self.ensemble_weights)} weights")

    @property
    def members(self) -> List[str]:
        return [m for m in self.all_models if m != self.held_out]


@dataclass
class HoldoutResult:
    held_out: str
    members: List[str]
    methods: List[str]
    ensemble_rates: Dict[str, float]
    holdout_rates: Dict[str, float]
    n_examples: int


def run_holdout_eval(spec: HoldoutSpec, models: Dict[str, GradientOracle],
                     methods: Sequence[Union[str, AttackMethod]], dataset: Dataset, cfg: AttackConfig,
                     workers: int = 1, debug_log: Callable[[str], None] = _noop_log) -> HoldoutResult:
    """Craft on the fused ensemble of all models but one, then score on the excluded model"""
    missing = [m for m in spec.all_models if m not in models]
    if missing:
        raise EvaluationError(f"Unknown models in hold-out spec: {missing}")
    method_list = _method_names(methods)
    _check_shapes({n: models[n] for n in spec.all_models}, dataset)
    ensemble = EnsembleModel([models[n] for n in spec.members], spec.ensemble_weights)
    target = models[spec.held_out]
    subset = clean_correct_subset([models[n] for n in spec.all_models] + [ensemble], dataset)
    if len(subset) == 0:
        raise EvaluationError("No example is classified correctly by every model and the ensemble")
    examples = subset.examples()
    guard = InvariantGuard()
    ensemble_rates, holdout_rates = {}, {}
    for method in method_list:
        results = generate_adversarials(ensemble, examples, replace(cfg, method=method, record_trace=False),
                                        workers, guard)
        ensemble_rates[method.value] = sum(r.success for r in results) / len(results)
        holdout_rates[method.value] = success_rate(target, [(r.x_adv, r.true_label) for r in results])
        debug_log(f"hold-out -{spec.held_out} {method.display_name}: ensemble "
                  f"{ensemble_rates[method.value]:.3f}, hold-out {holdout_rates[method.value]:.3f}")
    return HoldoutResult(spec.held_out, spec.members, [m.value for m in method_list],
                         ensemble_rates, holdout_rates, len(examples))


@dataclass
class HoldoutTable:
    """Every model held out in turn; rows are methods, columns held-out models plus the average"""
    held_out: List[str]
    methods: List[str]
    ensemble: Dict[str, List[float]]
    holdout: Dict[str, List[float]]
    n_examples: List[int]
    eps_ball: float
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)

    def average(self, section: str, method: str) -> float:
        values = getattr(self, section)[AttackMethod.parse(method).value]
        return float(np.mean(values))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "HoldoutTable":
        return cls(**d)


def run_holdout_table(models: Dict[str, GradientOracle], methods: Sequence[Union[str, AttackMethod]],
                      dataset: Dataset, cfg: AttackConfig, seed: int = 0,
                      weights: Optional[Dict[str, List[float]]] = None, workers: int = 1,
                      debug_log: Callable[[str], None] = _noop_log) -> HoldoutTable:
    method_list = _method_names(methods)
    names = list(models)
    if len(names) < 3:
        raise EvaluationError(f"A hold-out table needs at least 3 models, got {len(names)}")
    ensemble = {m.value: [] for m in method_list}
    holdout = {m.value: [] for m in method_list}
    counts = []
    for name in names:
        spec = HoldoutSpec(names, name, (weights or {}).get(name))
        result = run_holdout_eval(spec, models, method_list, dataset, cfg, workers, debug_log)
        for m in result.methods:
            ensemble[m].append(result.ensemble_rates[m])
            holdout[m].append(result.holdout_rates[m])
        counts.append(result.n_examples)
    return HoldoutTable(names, [m.value for m in method_list], ensemble, holdout, counts,
                        cfg.eps_ball, seed, {"attack": cfg.to_dict(), "filtering": FILTERING_NOTE})


@dataclass
class TrendReport:
    challenger: str
    baseline: str
    margin: float
    method_means: Dict[str, float]
    per_seed_diffs: List[float]
    wins: int
    min_wins: int
    trend_holds: bool


def compare_methods(tables: Sequence[HoldoutTable], challenger: str = "abfgsm", baseline: str = "ifgsm",
                    margin: float = 0.05, min_wins: int = 3) -> TrendReport:
    """
    Summarise hold-out averages across training seeds. The trend holds when
    the challenger's mean is >= the baseline's and it beats the baseline by
    `margin` in at least `min_wins` seeds.
    """
    if not tables:
        raise EvaluationError("compare_methods needs at least one hold-out table")
    challenger = AttackMethod.parse(challenger).value
    baseline = AttackMethod.parse(baseline).value
    methods = tables[0].methods
    for needed in (challenger, baseline):
        if needed not in methods:
            raise EvaluationError(f"Method '{needed}' missing from the hold-out tables")
    means = {m: float(np.mean([t.average("holdout", m) for t in tables])) for m in methods}
    diffs = [t.average("holdout", challenger) - t.average("holdout", baseline) for t in tables]
    wins = sum(1 for d in diffs if d >= margin)
    holds = means[challenger] >= means[baseline] and wins >= min(min_wins, len(tables))
    return TrendReport(challenger, baseline, margin, means, diffs, wins, min_wins, holds)


def epsilon_sweep(oracle: GradientOracle, method: Union[str, AttackMethod], dataset: Dataset,
                  cfg: AttackConfig, eps_values: Sequence[float], workers: int = 1) -> List[float]:
    """White-box rate of one method at each radius, always on the same clean-correct subset"""
    subset = clean_correct_subset([oracle], dataset)
    if len(subset) == 0:
        raise EvaluationError("No clean-correct examples to sweep over")
    examples = subset.examples()
    rates = []
    for eps in eps_values:
        results = generate_adversarials(oracle, examples, replace(cfg, method=AttackMethod.parse(method),
                                                                  eps_ball=eps, record_trace=False), workers)
        rates.append(sum(r.success for r in results) / len(results))
    return rates


def _reproducibility_header(config: Dict[str, Any]) -> str:
    return "# config: " + json.dumps(config, sort_keys=True) + "\n"


def _matrix_csv(matrix: TransferMatrix, f):
    writer = csv.writer(f)
    for mi, method in enumerate(matrix.methods):
        writer.writerow([AttackMethod.parse(method).display_name] + matrix.target_models)
        for si, source in enumerate(matrix.source_models):
            writer.writerow([source] + [repr(r) for r in matrix.rates[mi][si]])


def _holdout_csv(table: HoldoutTable, f):
    writer = csv.writer(f)
    writer.writerow(["section", "method"] + [f"-{name}" for name in table.held_out] + ["Avg."])
    for section in ("ensemble", "holdout"):
        for method in table.methods:
            values = getattr(table, section)[method]
            writer.writerow([section, AttackMethod.parse(method).display_name]
                            + [repr(v) for v in values] + [repr(table.average(section, method))])


def report(result: Union[TransferMatrix, HoldoutTable], fmt: str, path: PathLike) -> Path:
    """Write a CSV (table layout, '#' config header) or JSON (full record) report"""
    if not result.methods:
        raise EvaluationError("Refusing to write a report with no methods")
    if fmt not in ("csv", "json"):
        raise EvaluationError(f"Unknown report format {fmt!r}; use 'csv' or 'json'")
    path = Path(path)
    full_config = dict(result.config, eps_ball=result.eps_ball, seed=result.seed)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            if fmt == "json":
                json.dump({"type": type(result).__name__, "config": full_config, "result": result.to_dict()},
                          f, indent=2, sort_keys=True)
            else:
                f.write(_reproducibility_header(full_config))
                if isinstance(result, TransferMatrix):
                    _matrix_csv(result, f)
                else:
                    _holdout_csv(result, f)
    except OSError as e:
        raise EvaluationError(f"Cannot write report {path}: {e}") from e
    return path


def load_report(path: PathLike) -> Union[TransferMatrix, HoldoutTable]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise EvaluationError(f"Cannot read report {path}: {e}") from e
    kinds = {"TransferMatrix": TransferMatrix, "HoldoutTable": HoldoutTable}
    if payload.get("type") not in kinds:
        raise EvaluationError(f"{path} is not a JSON evaluation report")
    return kinds[payload["type"]].from_dict(payload["result"])
