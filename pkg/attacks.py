"""
Attacks - the iterative gradient-sign family as interchangeable update rules
FGSM, I-FGSM, MI-FGSM, NI-FGSM, AI-FGSM and AB-FGSM share one driver loop:
evaluate the gradient, let the rule pick a direction and step size, take the
step and project back onto the eps-ball and input domain
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from invariants import DOMAIN_BOUND, LINF_BOUND, InvariantGuard, InvariantViolation
from models import GradientOracle, LabeledExample, predict
from tensor_core import (DTYPE, LabError, Tensor, clip_ball, l1_normalized,
                         l2_norm, linf_norm, sign, zeros_like)


class AttackError(LabError):
    """Bad attack configuration, input or method"""


class AttackMethod(Enum):
    FGSM = "fgsm"
    IFGSM = "ifgsm"
    MIFGSM = "mifgsm"
    NIFGSM = "nifgsm"
    AIFGSM = "aifgsm"
    ABFGSM = "abfgsm"

    @classmethod
    def parse(cls, value) -> "AttackMethod":
        """Accepts enum members and spellings like 'AB-FGSM', 'ab_fgsm', 'abfgsm'"""
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        for method in cls:
            if method.value == key:
                return method
        raise AttackError(f"Unknown attack method {value!r}; choose from {[m.value for m in cls]}")

    @property
    def display_name(self) -> str:
        return {"fgsm": "FGSM", "ifgsm": "I-FGSM", "mifgsm": "MI-FGSM", "nifgsm": "NI-FGSM",
                "aifgsm": "AI-FGSM", "abfgsm": "AB-FGSM"}[self.value]


ITERATIVE_METHODS = [AttackMethod.IFGSM, AttackMethod.MIFGSM, AttackMethod.NIFGSM,
                     AttackMethod.AIFGSM, AttackMethod.ABFGSM]


@dataclass
class AttackConfig:
    eps_ball: float = 0.1
    steps: int = 10
    step_alpha: Optional[float] = None  # None: eps_ball / steps, or eps_ball for AI/AB
    momentum_mu: float = 1.0
    beta1: float = 0.99
    beta2: float = 0.999
    stabilizer_delta: float = 1e-14
    amsgrad: bool = True
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    method: AttackMethod = AttackMethod.ABFGSM
    ai_l2_normalized: bool = False
    record_trace: bool = False
    check_iterates: bool = True

    def __post_init__(self):
        self.method = AttackMethod.parse(self.method)
        if not (self.eps_ball >= 0 and math.isfinite(self.eps_ball)):
            raise AttackError(f"eps_ball must be finite and >= 0, got {self.eps_ball}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise AttackError(f"steps must be a positive integer, got {self.steps}")
        self.steps = int(self.steps)
        # beta1 = 0 is allowed: it collapses the belief term (m_t == g_t)
        if not 0 <= self.beta1 < 1:
            raise AttackError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            raise AttackError(f"beta2 must lie in (0, 1), got {self.beta2}")
        if not self.stabilizer_delta > 0:
            raise AttackError(f"stabilizer_delta must be > 0, got {self.stabilizer_delta}")
        if self.domain_lo > self.domain_hi:
            raise AttackError(f"Empty input domain [{self.domain_lo}, {self.domain_hi}]")
        if self.step_alpha is not None and self.step_alpha < 0:
            raise AttackError(f"step_alpha must be >= 0, got {self.step_alpha}")

    @property
    def alpha(self) -> float:
        return self.step_alpha if self.step_alpha is not None else self.eps_ball / self.steps

    @property
    def adaptive_alpha(self) -> float:
        """Base size for AI-FGSM and AB-FGSM; their own normalizers split it over the horizon"""
        return self.step_alpha if self.step_alpha is not None else self.eps_ball

    @classmethod
    def image_preset(cls, **overrides) -> "AttackConfig":
        """8-bit image defaults: eps 16 grey levels on [0, 1] pixels, 10 steps"""
        values = dict(eps_ball=16 / 255, steps=10, momentum_mu=1.0, beta1=0.99,
                      beta2=0.999, stabilizer_delta=1e-14)
        values.update(overrides)
        return cls(**values)

    def with_overrides(self, **changes) -> "AttackConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise AttackError(f"Unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackState:
    t: int
    x_adv: Tensor
    m: Tensor
    second: Tensor
    g_accum: Tensor
    gamma: float = 0.0

    @classmethod
    def initial(cls, x: Tensor) -> "AttackState":
        return cls(t=0, x_adv=x.copy(), m=zeros_like(x), second=zeros_like(x), g_accum=zeros_like(x))


@dataclass
class IterationRecord:
    t: int
    eval_point: Tensor
    loss: float
    gradient: Tensor
    direction: Tensor
    step_size: float
    x_adv: Tensor
    m: Tensor
    second: Tensor
    g_accum: Tensor
    gamma: float


@dataclass
class AttackResult:
    x_adv: Tensor
    success: bool
    iterations_used: int
    final_loss: float
    linf_distance: float
    true_label: int
    predicted_label: int
    method: AttackMethod
    trace: List[IterationRecord] = field(default_factory=list)


def ai_step_schedule(alpha: float, beta1: float, beta2: float, steps: int) -> np.ndarray:
    """
    AI-FGSM per-step sizes alpha_{t+1}, t = 0..T-1. Each bias-correction ratio
    is normalized by the sum over the full horizon, so the sizes sum to alpha.
    """
    ratios = np.array([math.sqrt(1 - beta2 ** (i + 1)) / (1 - beta1 ** (i + 1)) for i in range(steps)])
    return alpha * ratios / ratios.sum()


def ab_gamma(t: int, beta1: float, beta2: float) -> float:
    """AB-FGSM normalizer: cumulative ratio sum over completed iterations 1..t (exponents 2..t+1)"""
    return math.fsum(math.sqrt(1 - beta2 ** (i + 1)) / (1 - beta1 ** (i + 1)) for i in range(1, t + 1))


def belief_moment_update(m: Tensor, s: Tensor, g: Tensor, t: int, beta1: float, beta2: float,
                         delta: float, amsgrad: bool) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """
    One AdaBelief moment step at iteration t >= 1.
    Returns (m_t, s_t, m_hat_t, s_hat_t); delta enters s_hat before bias correction.
    """
    m_new = beta1 * m + (1 - beta1) * g
    s_new = beta2 * s + (1 - beta2) * np.square(g - m_new)
    if amsgrad:
        s_new = np.maximum(s, s_new)
    m_hat = m_new / (1 - beta1 ** t)
    s_hat = (s_new + delta) / (1 - beta2 ** t)
    return m_new, s_new, m_hat, s_hat


class UpdateRule:
    """Base rule: gradient at the current iterate, plain sign step of size alpha"""

    method = AttackMethod.IFGSM

    def iterations(self, cfg: AttackConfig) -> int:
        return cfg.steps

    def start(self, state: AttackState, cfg: AttackConfig):
        pass

    def eval_point(self, state: AttackState, cfg: AttackConfig) -> Tensor:
        return state.x_adv

    def update(self, state: AttackState, grad: Tensor, cfg: AttackConfig) -> Tuple[Tensor, float]:
        return sign(grad), cfg.alpha


class FgsmRule(UpdateRule):
    method = AttackMethod.FGSM

    def iterations(self, cfg: AttackConfig) -> int:
        return 1

    def update(self, state, grad, cfg):
        return sign(grad), cfg.eps_ball


class IfgsmRule(UpdateRule):
    method = AttackMethod.IFGSM


class MifgsmRule(UpdateRule):
    method = AttackMethod.MIFGSM

    def update(self, state, grad, cfg):
        state.g_accum = cfg.momentum_mu * state.g_accum + l1_normalized(grad)
        return sign(state.g_accum), cfg.alpha


class NifgsmRule(MifgsmRule):
    method = AttackMethod.NIFGSM

    def eval_point(self, state, cfg):
        # lookahead is not clipped; only the committed iterate is
        return state.x_adv + cfg.alpha * cfg.momentum_mu * state.g_accum


class AifgsmRule(UpdateRule):
    method = AttackMethod.AIFGSM

    def start(self, state, cfg):
        self.schedule = ai_step_schedule(cfg.adaptive_alpha, cfg.beta1, cfg.beta2, cfg.steps)

    def update(self, state, grad, cfg):
        g = l1_normalized(grad)
        state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
        state.second = cfg.beta2 * state.second + (1 - cfg.beta2) * np.square(g)
        tau = state.m / (cfg.stabilizer_delta + np.sqrt(state.second))
        step_size = float(self.schedule[state.t - 1])
        if not cfg.ai_l2_normalized:
            return sign(tau), step_size
        norm = l2_norm(tau)
        return (tau / norm if norm > 0 else zeros_like(tau)), step_size


class AbfgsmRule(UpdateRule):
    method = AttackMethod.ABFGSM

    def update(self, state, grad, cfg):
        state.gamma = ab_gamma(state.t, cfg.beta1, cfg.beta2)
        state.m, state.second, m_hat, s_hat = belief_moment_update(
            state.m, state.second, grad, state.t, cfg.beta1, cfg.beta2,
            cfg.stabilizer_delta, cfg.amsgrad)
        direction = sign(m_hat / (np.sqrt(s_hat) + cfg.stabilizer_delta))
        return direction, cfg.adaptive_alpha / state.gamma


RULES: Dict[AttackMethod, Callable[[], UpdateRule]] = {
    AttackMethod.FGSM: FgsmRule,
    AttackMethod.IFGSM: IfgsmRule,
    AttackMethod.MIFGSM: MifgsmRule,
    AttackMethod.NIFGSM: NifgsmRule,
    AttackMethod.AIFGSM: AifgsmRule,
    AttackMethod.ABFGSM: AbfgsmRule,
}


def _check_example(oracle: GradientOracle, example: LabeledExample, cfg: AttackConfig) -> Tensor:
    x = oracle.check_input(example.features)
    oracle.check_label(example.label)
    if x.size and (x.min() < cfg.domain_lo or x.max() > cfg.domain_hi):
        raise AttackError(f"Example features leave the domain [{cfg.domain_lo}, {cfg.domain_hi}]")
    return x


def _drive(oracle: GradientOracle, example: LabeledExample, cfg: AttackConfig,
           rule: UpdateRule, guard: Optional[InvariantGuard]) -> AttackResult:
    guard = guard or InvariantGuard()
    x = _check_example(oracle, example, cfg)
    state = AttackState.initial(x)
    rule.start(state, cfg)
    trace: List[IterationRecord] = []
    for _ in range(rule.iterations(cfg)):
        point = rule.eval_point(state, cfg)
        loss, grad = oracle.loss_and_input_grad(point, example.label)
        state.t += 1
        direction, step_size = rule.update(state, grad, cfg)
        state.x_adv = clip_ball(state.x_adv + step_size * direction, x,
                                cfg.eps_ball, cfg.domain_lo, cfg.domain_hi)
        if cfg.check_iterates:
            guard.enforce_iterate(state.x_adv, x, cfg.eps_ball, cfg.domain_lo, cfg.domain_hi, state.second)
        if cfg.record_trace:
            trace.append(IterationRecord(
                t=state.t, eval_point=np.array(point, dtype=DTYPE), loss=loss,
                gradient=grad.copy(), direction=np.array(direction, dtype=DTYPE),
                step_size=step_size, x_adv=state.x_adv.copy(), m=state.m.copy(),
                second=state.second.copy(), g_accum=state.g_accum.copy(), gamma=state.gamma))

    predicted = predict(oracle, state.x_adv)
    return AttackResult(
        x_adv=state.x_adv,
        success=predicted != int(example.label),
        iterations_used=state.t,
        final_loss=oracle.loss(state.x_adv, example.label),
        linf_distance=linf_norm(state.x_adv - x),
        true_label=int(example.label),
        predicted_label=predicted,
        method=rule.method,
        trace=trace,
    )


def attack_fgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, FgsmRule(), guard)


def attack_ifgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, IfgsmRule(), guard)


def attack_mifgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, MifgsmRule(), guard)


def attack_nifgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, NifgsmRule(), guard)


def attack_aifgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, AifgsmRule(), guard)


def attack_abfgsm(oracle, example, cfg, guard=None) -> AttackResult:
    return _drive(oracle, example, cfg, AbfgsmRule(), guard)


def run_attack(oracle: GradientOracle, example: LabeledExample, cfg: AttackConfig,
               guard: Optional[InvariantGuard] = None) -> AttackResult:
    """Dispatch on cfg.method and re-check the L-inf and domain invariants on the result"""
    rule_cls = RULES.get(cfg.method)
    if rule_cls is None:
        raise AttackError(f"Unknown attack method {cfg.method!r}")
    guard = guard or InvariantGuard()
    result = _drive(oracle, example, cfg, rule_cls(), guard)
    ok, reason = guard.check_linf_bound(result.x_adv, example.features, cfg.eps_ball)
    if not ok:
        raise InvariantViolation(LINF_BOUND, reason)
    ok, reason = guard.check_domain(result.x_adv, cfg.domain_lo, cfg.domain_hi)
    if not ok:
        raise InvariantViolation(DOMAIN_BOUND, reason)
    return result
