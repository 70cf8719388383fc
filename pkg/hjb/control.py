"""Clamped controllers derived from value functions, and the Hamiltonian."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Any

import numpy as np

from hjb.errors import UsageError
from hjb.poly import Polynomial, PolynomialArray
from lib.utils import clamp

if TYPE_CHECKING:
    from hjb.dynamics import CostSpec, RationalControlAffineSystem


@dataclass(frozen=True, eq=False)
class SaturatingController:
    """``u = clamp(policy(x), u_min, u_max)`` elementwise."""

    policy: tuple[Polynomial, ...]
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", tuple(self.policy))
        object.__setattr__(self, "u_min", np.asarray(self.u_min, dtype=float).reshape(-1))
        object.__setattr__(self, "u_max", np.asarray(self.u_max, dtype=float).reshape(-1))
        if not (len(self.policy) == len(self.u_min) == len(self.u_max)):
            raise UsageError("controller needs one policy entry and one bound pair per input")

    @property
    def n_u(self) -> int:
        return len(self.policy)

    @cached_property
    def _array(self) -> PolynomialArray:
        return PolynomialArray(list(self.policy))

    def raw(self, x: Any) -> np.ndarray:
        return self._array(x)

    def eval(self, x: Any) -> np.ndarray:
        return clamp(self._array(x), self.u_min, self.u_max)

    def eval_many(self, x: np.ndarray) -> np.ndarray:
        return self.eval(np.atleast_2d(x))

    __call__ = eval

    def to_text(self) -> list[str]:
        return [p.to_text() for p in self.policy]


@dataclass(frozen=True, eq=False)
class ValueController:
    """The clamped minimiser of the Hamiltonian of ``J``.

    For diagonal R the minimisation decouples into one scalar QP per input:
    ``u_m = clamp(-(f2' grad J)_m / (2 r_m))``.
    """

    J: Polynomial
    system: RationalControlAffineSystem
    R: np.ndarray

    def __post_init__(self) -> None:
        if self.J.registry != self.system.registry:
            raise UsageError("value function must be defined over the system's state registry")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(-1))

    @property
    def u_min(self) -> np.ndarray:
        return self.system.u_min

    @property
    def u_max(self) -> np.ndarray:
        return self.system.u_max

    @cached_property
    def _gradient(self) -> PolynomialArray:
        return PolynomialArray(self.J.gradient())

    def gradient(self, x: Any) -> np.ndarray:
        return self._gradient(x)

    def unclamped(self, x: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        grad = self._gradient(x)
        f2 = self.system.f2(x)
        return -0.5 * np.einsum("...i,...ij->...j", grad, f2) / self.R

    def eval(self, x: Any) -> np.ndarray:
        return clamp(self.unclamped(x), self.u_min, self.u_max)

    def eval_many(self, x: np.ndarray) -> np.ndarray:
        return self.eval(np.atleast_2d(x))

    __call__ = eval

    def polynomial_policy(self) -> tuple[Polynomial, ...]:
        """``-R^-1 n2' grad J / 2`` with the positive denominator d dropped."""
        gradient = self.J.gradient()
        policy = []
        for j in range(self.system.n_u):
            total = Polynomial.zero(self.J.registry)
            for i, g in enumerate(gradient):
                total = total + self.system.n2[i][j] * g
            policy.append(total * (-0.5 / float(self.R[j])))
        return tuple(policy)

    def saturating(self) -> SaturatingController:
        return SaturatingController(self.polynomial_policy(), self.u_min, self.u_max)


def hamiltonian(J: Polynomial, system: RationalControlAffineSystem, cost: CostSpec, x: Any, u: Any) -> Any:
    """``l(x, u) + grad J(x) . f(x, u)`` at a point or for a batch."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    grad = PolynomialArray(J.gradient())(x)
    return cost.running(x, u) + np.sum(grad * system.dynamics(x, u), axis=-1)
