"""
Invariant Guard - checks every attack iterate against the contract
L-inf ball, input domain, finiteness and second-moment sign
Each check returns (ok, reason); enforce() raises with the invariant name
"""

from typing import Dict, Optional, Tuple

import numpy as np

from tensor_core import LabError, Tensor

LINF_TOLERANCE = 1e-12

LINF_BOUND = "linf_bound"
DOMAIN_BOUND = "domain_bound"
FINITE = "finite"
SECOND_MOMENT_NONNEGATIVE = "second_moment_nonnegative"


class InvariantViolation(LabError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"Invariant '{name}' violated: {detail}")
        self.name = name
        self.detail = detail


class InvariantGuard:
    """
    Validates attack iterates. A guard belongs to one thread; concurrent runs
    use their own guards and fold the counts back with merge().
    """

    def __init__(self, tolerance: float = LINF_TOLERANCE):
        self.tolerance = tolerance
        self.checks = 0
        self.violations: Dict[str, int] = {}

    def check_linf_bound(self, x_adv: Tensor, x_orig: Tensor, eps_ball: float) -> Tuple[bool, str]:
        distance = float(np.max(np.abs(np.asarray(x_adv) - np.asarray(x_orig)), initial=0.0))
        if distance > eps_ball + self.tolerance:
            return (False, f"||x' - x||_inf = {distance!r} exceeds eps_ball {eps_ball!r}")
        return (True, "within ball")

    def check_domain(self, x_adv: Tensor, lo: float, hi: float) -> Tuple[bool, str]:
        x_adv = np.asarray(x_adv)
        if x_adv.size and (x_adv.min() < lo or x_adv.max() > hi):
            return (False, f"iterate leaves domain [{lo}, {hi}] (min {x_adv.min()!r}, max {x_adv.max()!r})")
        return (True, "within domain")

    def check_finite(self, t: Tensor, what: str = "iterate") -> Tuple[bool, str]:
        if not np.all(np.isfinite(t)):
            return (False, f"{what} contains NaN or Inf")
        return (True, "finite")

    def check_second_moment(self, second: Optional[Tensor]) -> Tuple[bool, str]:
        if second is not None and np.any(np.asarray(second) < 0):
            return (False, "second-moment accumulator has a negative element")
        return (True, "non-negative")

    def _record(self, name: str, outcome: Tuple[bool, str]):
        self.checks += 1
        ok, reason = outcome
        if not ok:
            self.violations[name] = self.violations.get(name, 0) + 1
            raise InvariantViolation(name, reason)

    def enforce_iterate(self, x_adv: Tensor, x_orig: Tensor, eps_ball: float,
                        lo: float, hi: float, second: Optional[Tensor] = None):
        """Raise InvariantViolation on the first broken invariant"""
        self._record(FINITE, self.check_finite(x_adv))
        self._record(LINF_BOUND, self.check_linf_bound(x_adv, x_orig, eps_ball))
        self._record(DOMAIN_BOUND, self.check_domain(x_adv, lo, hi))
        self._record(SECOND_MOMENT_NONNEGATIVE, self.check_second_moment(second))

    def merge(self, other: "InvariantGuard"):
        self.checks += other.checks
        for name, count in other.violations.items():
            self.violations[name] = self.violations.get(name, 0) + count

    @property
    def violation_count(self) -> int:
        return sum(self.violations.values())
