"""Particle discretisations of Wasserstein gradient flows.

Every stepper maps ``(ParticleState, grad, FlowConfig)`` to a new state with
forward Euler in time.  ``grad`` is the Wasserstein gradient evaluated at the
current particle positions ``X``; arrays may have any shape (``(N, 3)`` for
point sets, ``(12,)`` for a flattened affine map).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "FlowConfig",
    "ParticleState",
    "NonFiniteGradientError",
    "bias_correction",
    "adamflow_step",
    "wgf_step",
    "hbf_step",
    "nesterov_step",
    "nesterov_damping",
    "step",
    "STEPPERS",
    "adam_ode_reference",
    "potential_value",
    "potential_gradient",
    "save_state_csv",
    "load_state_csv",
]

METHODS = ("wgf", "hbf", "nesterov", "adamflow")


class NonFiniteGradientError(FloatingPointError):
    """A gradient supplied to a stepper contained NaN or inf."""


@dataclass(frozen=True)
class FlowConfig:
    """Integrator constants.

    ``alpha``/``beta`` are the first/second moment decay rates, ``eps`` the
    denominator stabiliser, ``lr`` the learning rate ``eta``, ``h`` the Euler
    step, ``n_steps`` the step budget and ``damping`` the heavy-ball
    friction ``a``.
    """

    method: str = "adamflow"
    alpha: float = 0.9
    beta: float = 0.95
    eps: float = 1e-10
    lr: float = 1e-2
    h: float = 1.0
    n_steps: int = 1500
    damping: float = 0.9

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not (0.0 <= self.alpha < 1.0 and 0.0 <= self.beta < 1.0):
            raise ValueError("alpha and beta must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if not self.damping > 0:
            raise ValueError("damping must be > 0")
        if self.method == "adamflow" and not 4 * self.alpha - self.beta < 3:
            warnings.warn(
                f"4*alpha - beta = {4 * self.alpha - self.beta:.3g} >= 3: "
                "AdamFlow convergence is not guaranteed",
                RuntimeWarning,
                stacklevel=3,
            )


@dataclass(frozen=True)
class ParticleState:
    X: np.ndarray
    M: np.ndarray
    V: np.ndarray
    k: int = 0
    h: float = field(default=1.0, repr=False)

    @classmethod
    def initial(cls, X, h=1.0):
        X = np.array(X, dtype=np.float64)
        return cls(X, np.zeros_like(X), np.zeros_like(X), 0, h)

    @property
    def t(self):
        return self.h * self.k

    def reset_moments(self):
        return replace(self, M=np.zeros_like(self.X), V=np.zeros_like(self.X))


def _check_grad(grad, X):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != X.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {X.shape}")
    bad = ~np.isfinite(grad)
    if bad.any():
        flat = np.argwhere(bad)[0]
        raise NonFiniteGradientError(f"non-finite gradient at particle {int(flat[0])}")
    return grad


def bias_correction(t, alpha, beta, eps, m, v):
    """Bias-corrected AdamFlow direction ``g_t(m, v)``.

    Uses the continuous-time corrections ``1 - exp(-(1 - alpha) t)`` and
    ``1 - exp(-(1 - beta) t)``; ``eps`` is added outside the square root.
    """
    if not t > 0:
        raise ValueError("bias correction is undefined for t <= 0")
    cm = -math.expm1(-(1.0 - alpha) * t)
    cv = -math.expm1(-(1.0 - beta) * t)
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (m / cm) / (np.sqrt(v / cv) + eps)


def adamflow_step(state, grad, cfg):
    grad = _check_grad(grad, state.X)
    h = cfg.h
    M = state.M + h * (1.0 - cfg.alpha) * (grad - state.M)
    V = state.V + h * (1.0 - cfg.beta) * (grad * grad - state.V)
    t = h * (state.k + 1)
    X = state.X - h * cfg.lr * bias_correction(t, cfg.alpha, cfg.beta, cfg.eps, M, V)
    return ParticleState(X, M, V, state.k + 1, h)


def wgf_step(state, grad, cfg):
    grad = _check_grad(grad, state.X)
    X = state.X - cfg.h * cfg.lr * grad
    return ParticleState(X, state.M, state.V, state.k + 1, cfg.h)


def hbf_step(state, grad, cfg):
    """Heavy-ball flow: ``dm/dt = -a m - grad``, ``dx/dt = eta m``."""
    grad = _check_grad(grad, state.X)
    h = cfg.h
    M = state.M + h * (-cfg.damping * state.M - grad)
    X = state.X + h * cfg.lr * M
    return ParticleState(X, M, state.V, state.k + 1, h)


def nesterov_damping(t, h):
    """Friction ``3 / t`` of the Nesterov flow, with ``t`` clamped below at ``h``."""
    return 3.0 / max(t, h)


def nesterov_step(state, grad, cfg):
    """Nesterov flow: ``dm/dt = -(3/t) m - grad``, ``dx/dt = eta m``."""
    grad = _check_grad(grad, state.X)
    h = cfg.h
    a = nesterov_damping(h * state.k, h)
    M = state.M + h * (-a * state.M - grad)
    X = state.X + h * cfg.lr * M
    return ParticleState(X, M, state.V, state.k + 1, h)


STEPPERS = {
    "wgf": wgf_step,
    "hbf": hbf_step,
    "nesterov": nesterov_step,
    "adamflow": adamflow_step,
}


def step(state, grad, cfg):
    return STEPPERS[cfg.method](state, grad, cfg)


# ---------------------------------------------------------------------------
# reference integrator

def _gt_with_limit(t, alpha, beta, eps, m, v, g):
    if t > 0:
        return bias_correction(t, alpha, beta, eps, m, v)
    # t -> 0+ limit with m(0) = v(0) = 0: corrected moments tend to g and g^2
    return g / (np.abs(g) + eps)


def adam_ode_reference(grad_fn, x0, cfg, T, substeps):
    """Integrate the Adam ODE from ``(x0, 0, 0)`` with classic RK4.

    Returns ``(times, xs, ms, vs)`` sampled at the ``substeps + 1`` grid
    points of ``[0, T]``.
    """
    x0 = np.array(x0, dtype=np.float64)
    a, b, eps, lr = cfg.alpha, cfg.beta, cfg.eps, cfg.lr

    def rhs(t, y):
        x, m, v = y
        g = np.asarray(grad_fn(x), dtype=np.float64)
        dm = (1 - a) * (g - m)
        dv = (1 - b) * (g * g - v)
        dx = -lr * _gt_with_limit(t, a, b, eps, m, v, g)
        return np.stack([dx, dm, dv])

    dt = T / substeps
    y = np.stack([x0, np.zeros_like(x0), np.zeros_like(x0)])
    out = np.empty((substeps + 1,) + y.shape)
    out[0] = y
    for n in range(substeps):
        t = n * dt
        k1 = rhs(t, y)
        k2 = rhs(t + dt / 2, y + dt / 2 * k1)
        k3 = rhs(t + dt / 2, y + dt / 2 * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n + 1] = y
    times = np.linspace(0.0, T, substeps + 1)
    return times, out[:, 0], out[:, 1], out[:, 2]


# ---------------------------------------------------------------------------
# potential-energy objectives

def _parse_potential(potential):
    if isinstance(potential, str):
        return potential, None
    name, *args = potential
    return name, (np.asarray(args[0], dtype=np.float64) if args else None)


def potential_value(potential, points):
    """Mean potential ``F[mu] = mean_i V(x_i)``.

    ``potential`` is ``("quadratic", center)`` for ``V = |x - c|^2 / 2`` or
    ``"rosenbrock2d"`` for ``(1 - x)^2 + 100 (y - x^2)^2`` on the first two
    coordinates.
    """
    name, c = _parse_potential(potential)
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if name == "quadratic":
        c = 0.0 if c is None else c
        return float(np.mean(0.5 * np.sum((x - c) ** 2, axis=1)))
    if name == "rosenbrock2d":
        u, w = x[:, 0], x[:, 1]
        return float(np.mean((1 - u) ** 2 + 100 * (w - u**2) ** 2))
    raise ValueError(f"unknown potential {name!r}")


def potential_gradient(potential, points):
    """``grad V`` at each particle; the Wasserstein gradient of the potential energy."""
    name, c = _parse_potential(potential)
    x = np.asarray(points, dtype=np.float64)
    if name == "quadratic":
        return x - (0.0 if c is None else c)
    if name == "rosenbrock2d":
        x2 = np.atleast_2d(x)
        out = np.zeros_like(x2)
        u, w = x2[:, 0], x2[:, 1]
        out[:, 0] = -2 * (1 - u) - 400 * u * (w - u**2)
        out[:, 1] = 200 * (w - u**2)
        return out.reshape(x.shape)
    raise ValueError(f"unknown potential {name!r}")


# ---------------------------------------------------------------------------
# checkpoints

def save_state_csv(state, path):
    X = np.atleast_2d(state.X)
    M = np.atleast_2d(state.M)
    V = np.atleast_2d(state.V)
    d = X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["k", "i"] + [f"x{j}" for j in range(d)] + [f"m{j}" for j in range(d)]
            + [f"v{j}" for j in range(d)] + ["h"]
        )
        for i in range(len(X)):
            w.writerow(
                [state.k, i] + [repr(float(c)) for c in np.concatenate([X[i], M[i], V[i]])]
                + [repr(float(state.h))]
            )


def load_state_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = (len(header) - 3) // 3
    data = np.array([[float(c) for c in r[2:-1]] for r in body])
    k = int(body[0][0])
    h = float(body[0][-1])
    return ParticleState(data[:, :d], data[:, d : 2 * d], data[:, 2 * d :], k, h)
