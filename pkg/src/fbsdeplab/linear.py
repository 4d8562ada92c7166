"""Scalar linear forward-backward systems with jumps.

State under the reference measure::

    dx = (a x + c) dt + (s1x x + s1c) dW1 + (s2x x + s2c) dW2
         + int (f1x x- + f1c) dN1c + int (f2x x- + f2c) dN2c

with observation drift ``b22 + b2y y``, noise ``sigma3`` and tilt ``lam``, and
backward equation

    -dy = (gx x + gy y + gz1 z1 + gz2 z2 + gzeta1 zeta1 + gzeta2 zeta2 + gc) dt - ...,
    y_T = phix x_T + phic.

``b2y != 0`` couples the backward component into the forward drift.  For
``b2y = 0`` the decoupling field is affine, ``y = A(t) x + B(t)``, with
``A, B`` solving linear ODEs; this is the closed form used as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.integrate import solve_ivp

from .errors import InvalidArgument
from .lq import _as_time_function
from .problem import FbsdepProblem
from .randmeasures import MarkSpace, empty_mark_space

SCALAR_FIELDS = ("a", "c", "s1x", "s1c", "s2x", "s2c", "b22", "b2y", "sigma3",
                 "gx", "gy", "gz1", "gz2", "gzeta1", "gzeta2", "gc")
MARK1_FIELDS = ("f1x", "f1c")
MARK2_FIELDS = ("f2x", "f2c", "lam")
DEFAULTS = {"sigma3": 1.0, "lam": 1.0}


@dataclass(frozen=True)
class LinearCoefficients:
    ms1: MarkSpace
    ms2: MarkSpace
    funcs: dict = field(repr=False)
    phix: float = 0.0
    phic: float = 0.0
    x0: float = 0.0
    tilt_floor: float = 1e-6
    coupled: bool = False

    @classmethod
    def from_values(cls, ms1=None, ms2=None, phix=0.0, phic=0.0, x0=0.0, tilt_floor=1e-6, **values):
        ms1 = empty_mark_space() if ms1 is None else ms1
        ms2 = empty_mark_space() if ms2 is None else ms2
        unknown = set(values) - set(SCALAR_FIELDS + MARK1_FIELDS + MARK2_FIELDS)
        if unknown:
            raise InvalidArgument(f"unknown coefficients: {sorted(unknown)}")
        funcs = {}
        for name in SCALAR_FIELDS:
            funcs[name] = _as_time_function(values.get(name, DEFAULTS.get(name, 0.0)))
        for name in MARK1_FIELDS:
            funcs[name] = _as_time_function(values.get(name, DEFAULTS.get(name, 0.0)), ms1.size)
        for name in MARK2_FIELDS:
            funcs[name] = _as_time_function(values.get(name, DEFAULTS.get(name, 0.0)), ms2.size)
        b2y = values.get("b2y", 0.0)
        coupled = callable(b2y) or float(b2y) != 0.0
        return cls(ms1, ms2, funcs, float(phix), float(phic), float(x0), float(tilt_floor), coupled)

    def at(self, t):
        ns = SimpleNamespace(**{k: f(t) for k, f in self.funcs.items()})
        ns.nu1, ns.nu2 = self.ms1.weights, self.ms2.weights
        return ns

    def to_problem(self):
        f = self.funcs

        def coupling(t, x, y, z1, z2, zeta1, zeta2, u):
            return f["b2y"](t) * y

        return FbsdepProblem(
            b1=lambda t, x, u: f["a"](t) * x + f["c"](t) + 0 * u,
            sigma1=lambda t, x, u: f["s1x"](t) * x + f["s1c"](t) + 0 * u,
            sigma2=lambda t, x, u: f["s2x"](t) * x + f["s2c"](t) + 0 * u,
            f1=lambda t, x, u, e: f["f1x"](t) * x + f["f1c"](t) + 0 * u,
            f2=lambda t, x, u, e: f["f2x"](t) * x + f["f2c"](t) + 0 * u,
            g=lambda t, x, y, z1, z2, zeta1, zeta2, u: (
                f["gx"](t) * x + f["gy"](t) * y + f["gz1"](t) * z1 + f["gz2"](t) * z2
                + f["gzeta1"](t) * zeta1 + f["gzeta2"](t) * zeta2 + f["gc"](t)),
            phi=lambda x: self.phix * np.asarray(x, dtype=float) + self.phic,
            b2=lambda t, x, u: f["b22"](t) + 0 * x,
            sigma3=f["sigma3"],
            f3=None,
            lam=lambda t, x, e: f["lam"](t) + 0 * x,
            x0=self.x0,
            ms1=self.ms1, ms2=self.ms2,
            coupling=coupling if self.coupled else None,
            tilt_floor=self.tilt_floor,
        )

    def reference_drift(self, t):
        """Slope and intercept of the (uncoupled) drift under the reference measure."""
        c = self.at(t)
        tilt = c.lam - 1.0
        slope = c.a - c.s2x * c.b22 / c.sigma3 - (tilt * c.f2x) @ c.nu2
        icpt = c.c - c.s2c * c.b22 / c.sigma3 - (tilt * c.f2c) @ c.nu2
        return slope, icpt


def affine_field(coeffs, T, rtol=1e-11, atol=1e-13):
    """Closed-form decoupling field ``theta(t, x) = A(t) x + B(t)`` of an uncoupled system.

    Returns ``(A, B)`` as callables of ``t``.
    """
    if coeffs.coupled:
        raise InvalidArgument("affine closed form needs an uncoupled system (b2y = 0)")

    def rhs(t, v):
        A, B = v
        c = coeffs.at(t)
        slope, icpt = coeffs.reference_drift(t)
        F1x, F1c = c.f1x @ c.nu1, c.f1c @ c.nu1
        F2x, F2c = c.f2x @ c.nu2, c.f2c @ c.nu2
        dA = -(A * slope + c.gx + c.gy * A + c.gz1 * A * c.s1x + c.gz2 * A * c.s2x
               + c.gzeta1 * A * F1x + c.gzeta2 * A * F2x)
        dB = -(A * icpt + c.gy * B + c.gz1 * A * c.s1c + c.gz2 * A * c.s2c
               + c.gzeta1 * A * F1c + c.gzeta2 * A * F2c + c.gc)
        return [dA, dB]

    sol = solve_ivp(rhs, (T, 0.0), [coeffs.phix, coeffs.phic], method="DOP853",
                    rtol=rtol, atol=atol, dense_output=True)
    if not sol.success:
        raise InvalidArgument(f"affine field ODE failed: {sol.message}")
    return (lambda t: sol.sol(t)[0]), (lambda t: sol.sol(t)[1])
