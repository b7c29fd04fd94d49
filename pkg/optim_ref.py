"""
Optimizer Reference - Adam and AdaBelief update rules on analytic objectives
Written independently of the attack module so the attack accumulators can be
cross-checked against them. Descent convention: theta <- theta - delta_theta
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Union

import numpy as np

from tensor_core import DTYPE, LabError, Tensor


class OptimizerError(LabError):
    """Invalid optimizer parameters or a divergent trajectory"""


class DivergenceError(OptimizerError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"Descent diverged at step {step} (loss {loss!r})")
        self.step = step
        self.loss = loss


class OptimizerVariant(Enum):
    ADAM = "adam"
    ADABELIEF = "adabelief"


@dataclass(frozen=True)
class OptimizerParams:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    stabilizer: float = 1e-8
    variant: OptimizerVariant = OptimizerVariant.ADABELIEF
    amsgrad: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", OptimizerVariant(self.variant))
        except ValueError:
            raise OptimizerError(f"Unknown optimizer variant: {self.variant!r}") from None
        if not 0 <= self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise OptimizerError(f"beta1/beta2 out of range: {self.beta1}, {self.beta2}")
        if not self.stabilizer > 0:
            raise OptimizerError(f"stabilizer must be > 0, got {self.stabilizer}")

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class OptimizerState:
    t: int
    theta: Tensor
    m: Tensor
    second: Tensor
    m_hat: Tensor
    second_hat: Tensor
    delta_theta: Tensor

    @classmethod
    def initial(cls, theta0) -> "OptimizerState":
        theta = np.array(theta0, dtype=DTYPE)
        z = np.zeros_like(theta)
        return cls(0, theta, z, z.copy(), z.copy(), z.copy(), z.copy())


def _advance(state: OptimizerState, grad: Tensor, params: OptimizerParams, belief: bool) -> OptimizerState:
    g = np.asarray(grad, dtype=DTYPE)
    if not np.all(np.isfinite(g)):
        raise OptimizerError("gradient contains NaN or Inf")
    t = state.t + 1
    m = params.beta1 * state.m + (1.0 - params.beta1) * g
    if belief:
        second = params.beta2 * state.second + (1.0 - params.beta2) * (g - m) ** 2
    else:
        second = params.beta2 * state.second + (1.0 - params.beta2) * g ** 2
    if params.amsgrad:
        second = np.maximum(state.second, second)
    m_hat = m / (1.0 - params.beta1 ** t)
    if belief:
        second_hat = (second + params.stabilizer) / (1.0 - params.beta2 ** t)
    else:
        second_hat = second / (1.0 - params.beta2 ** t)
    delta_theta = params.lr * m_hat / (np.sqrt(second_hat) + params.stabilizer)
    return OptimizerState(t, state.theta - delta_theta, m, second, m_hat, second_hat, delta_theta)


def step_adam(state: OptimizerState, grad: Tensor, params: OptimizerParams) -> OptimizerState:
    return _advance(state, grad, params, belief=False)


def step_adabelief(state: OptimizerState, grad: Tensor, params: OptimizerParams) -> OptimizerState:
    return _advance(state, grad, params, belief=True)


def step(state: OptimizerState, grad: Tensor, params: OptimizerParams) -> OptimizerState:
    if params.variant is OptimizerVariant.ADAM:
        return step_adam(state, grad, params)
    return step_adabelief(state, grad, params)


@dataclass(frozen=True)
class Objective:
    name: str
    loss: Callable[[Tensor], float]
    grad: Callable[[Tensor], Tensor]
    min_size: int = 1


def _rosenbrock(theta: Tensor) -> float:
    a, b = theta[:-1], theta[1:]
    return float(np.sum(100.0 * (b - a ** 2) ** 2 + (1.0 - a) ** 2))


def _rosenbrock_grad(theta: Tensor) -> Tensor:
    a, b = theta[:-1], theta[1:]
    grad = np.zeros_like(theta)
    grad[:-1] += -400.0 * a * (b - a ** 2) - 2.0 * (1.0 - a)
    grad[1:] += 200.0 * (b - a ** 2)
    return grad


OBJECTIVES: Dict[str, Objective] = {
    "quadratic": Objective("quadratic", lambda th: float(np.sum(th ** 2)), lambda th: 2.0 * th),
    "rosenbrock": Objective("rosenbrock", _rosenbrock, _rosenbrock_grad, min_size=2),
    "absolute": Objective("absolute", lambda th: float(np.sum(np.abs(th))), np.sign),
}


def get_objective(name: str) -> Objective:
    try:
        return OBJECTIVES[name]
    except KeyError:
        raise OptimizerError(f"Unknown objective {name!r}; choose from {sorted(OBJECTIVES)}") from None


@dataclass
class TrajectoryPoint:
    t: int
    theta: Tensor
    loss: float
    m: Tensor
    second: Tensor


@dataclass
class Trajectory:
    objective: str
    params: OptimizerParams
    points: List[TrajectoryPoint] = field(default_factory=list)

    @property
    def final(self) -> TrajectoryPoint:
        return self.points[-1]

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Rows of (t, theta_0..theta_{n-1}, loss) after a '#' config header"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        size = self.points[0].theta.size if self.points else 0
        with open(path, "w", newline="") as f:
            f.write("# " + json.dumps({"objective": self.objective, "params": self.params.to_dict()},
                                      sort_keys=True) + "\n")
            writer = csv.writer(f)
            writer.writerow(["t"] + [f"theta_{i}" for i in range(size)] + ["loss"])
            for p in self.points:
                writer.writerow([p.t] + [repr(float(v)) for v in p.theta.reshape(-1)] + [repr(p.loss)])
        return path


def run_descent(objective: str, params: OptimizerParams, steps: int, theta0) -> Trajectory:
    """Run `steps` optimizer steps; the initial point is recorded as t = 0"""
    obj = get_objective(objective)
    if steps < 0:
        raise OptimizerError(f"steps must be >= 0, got {steps}")
    state = OptimizerState.initial(theta0)
    if state.theta.size < obj.min_size:
        raise OptimizerError(f"{objective} needs at least {obj.min_size} coordinates")
    trajectory = Trajectory(objective, params)
    loss = obj.loss(state.theta)
    trajectory.points.append(TrajectoryPoint(0, state.theta.copy(), loss, state.m.copy(), state.second.copy()))
    for _ in range(steps):
        state = step(state, obj.grad(state.theta), params)
        loss = obj.loss(state.theta)
        if not math.isfinite(loss) or not np.all(np.isfinite(state.theta)):
            raise DivergenceError(state.t, loss)
        trajectory.points.append(TrajectoryPoint(state.t, state.theta.copy(), loss,
                                                 state.m.copy(), state.second.copy()))
    return trajectory


def with_variant(params: OptimizerParams, variant: OptimizerVariant) -> OptimizerParams:
    return replace(params, variant=variant)
