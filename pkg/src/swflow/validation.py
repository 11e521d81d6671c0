"""Independent oracles for the numerical contracts of the library.

Each ``check_*`` function runs one family of comparisons and returns a
:class:`CheckResult`; :func:`run_verification` runs them all.  Functions
under test can be swapped through the ``impl`` mapping, which is how the
test-suite confirms that an injected bug is caught.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import discrepancy as dsc
from . import flow as fl
from .geometry import adjacency, icosphere, make_rng, TriMesh
from .registration import AffineTransform, affine_gradients

__all__ = [
    "FDSpec",
    "CheckResult",
    "brute_force_w1d",
    "finite_diff",
    "relative_error",
    "discrete_adam_reference",
    "lyapunov_value",
    "random_point_pair",
    "CHECKS",
    "run_verification",
    "format_table",
]

GRAD_TOL = 1e-4
TIE_GAP = 1e-8


@dataclass(frozen=True)
class FDSpec:
    step: float = 1e-5
    scheme: str = "central"
    freeze_projections: bool = True
    freeze_assignments: bool = True

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("finite-difference step must be > 0")
        if self.scheme != "central":
            raise ValueError("only the central scheme is supported")


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    instances: int
    detail: str = ""


def brute_force_w1d(a, b):
    """Squared W2 by exhaustive search over all couplings (permutations)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise ValueError("unequal sample sizes")
    if len(a) > 8:
        raise ValueError(f"brute force limited to N <= 8, got {len(a)}")
    costs = np.mean((a[None, :] - b[_permutations(len(b))]) ** 2, axis=1)
    return float(costs.min())


@functools.lru_cache(maxsize=None)
def _permutations(n):
    table = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    table.setflags(write=False)
    return table


def finite_diff(objective, point, spec=None):
    """Central-difference gradient of a scalar ``objective`` at ``point``.

    ``point`` may have any shape; the result has the same shape.  Any
    non-finite evaluation raises ``FloatingPointError``.
    """
    spec = FDSpec() if spec is None else spec
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    hstep = spec.step
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + hstep
        fp = objective(x)
        flat[i] = orig - hstep
        fm = objective(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"objective is non-finite near coordinate {i}")
        out[i] = (fp - fm) / (2 * hstep)
    return out.reshape(x.shape)


def relative_error(analytic, reference):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.linalg.norm(reference), 1e-300)
    return float(np.linalg.norm(analytic - reference) / scale)


def discrete_adam_reference(grad_fn, x0, alpha, beta, eps, lr, K):
    """Iterates ``x_0 .. x_K`` of classic Adam with bias corrections ``1 - alpha^(k+1)``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    out = [x.copy()]
    for k in range(K):
        g = np.asarray(grad_fn(x), dtype=np.float64)
        m = alpha * m + (1 - alpha) * g
        v = beta * v + (1 - beta) * g * g
        mhat = m / (1 - alpha ** (k + 1))
        vhat = v / (1 - beta ** (k + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(x.copy())
    return np.array(out)


def lyapunov_value(state, cfg, objective_value):
    """``F + eta / (2 (1 - alpha)) * mean_i <M_i, g_t(M_i, V_i)>`` at ``t = h k``."""
    if state.k == 0:
        return float(objective_value)
    gt = fl.bias_correction(state.t, cfg.alpha, cfg.beta, cfg.eps, state.M, state.V)
    inner = np.sum(np.atleast_2d(state.M * gt), axis=1).mean()
    return float(objective_value + cfg.lr / (2 * (1 - cfg.alpha)) * inner)


# ---------------------------------------------------------------------------
# non-degenerate random instances

def _min_gap(values):
    s = np.sort(values)
    return np.inf if len(s) < 2 else float(np.min(np.diff(s)))


def _rank_tie_free(src, proj):
    return all(_min_gap(src @ p) > TIE_GAP for p in proj)


def _nn_tie_free(query, ref):
    if len(ref) < 2:
        return True
    d = np.sqrt(np.sum((query[:, None, :] - ref[None, :, :]) ** 2, axis=2))
    d.sort(axis=1)
    return bool(np.all(d[:, 1] - d[:, 0] > TIE_GAP))


def random_point_pair(rng, n_src, n_tgt, kind="swd", n_projections=4, max_tries=100):
    """Random ``(src, tgt, proj)`` with no rank or nearest-neighbour ties.

    Instances within ``1e-8`` of a tie are rejected and redrawn.
    """
    for _ in range(max_tries):
        src = rng.normal(size=(n_src, 3))
        tgt = rng.normal(size=(n_tgt, 3)) + rng.normal(scale=0.5, size=3)
        proj = dsc.sample_projections(n_projections, rng)
        if kind == "swd" and _rank_tie_free(src, proj):
            return src, tgt, proj
        if kind == "nn" and _nn_tie_free(src, tgt) and _nn_tie_free(tgt, src):
            return src, tgt, proj
    raise RuntimeError("could not draw a tie-free instance")


# ---------------------------------------------------------------------------
# checks

DEFAULT_IMPL = {
    "wasserstein_1d": dsc.wasserstein_1d,
    "swd_gradient": dsc.swd_gradient,
    "chamfer_gradient": dsc.chamfer_gradient,
    "icp_gradient": dsc.icp_gradient,
    "laplacian_gradient": dsc.laplacian_gradient,
    "laplacian_partial": dsc.laplacian_partial,
    "potential_gradient": fl.potential_gradient,
    "adamflow_step": fl.adamflow_step,
}


def _impl(impl, name):
    return (impl or {}).get(name, DEFAULT_IMPL[name])


def _result(name, errors, tol, detail=""):
    worst = float(np.max(errors)) if len(errors) else 0.0
    return CheckResult(name, bool(worst < tol), worst, tol, len(errors), detail)


def check_w1d(instances=200, seed=0, impl=None):
    w1d = _impl(impl, "wasserstein_1d")
    rng = make_rng(seed)
    errs = []
    for _ in range(instances):
        n = int(rng.integers(2, 9))
        a, b = rng.normal(size=n), rng.normal(size=n) * 2 + 0.3
        errs.append(abs(w1d(a, b)[0] - brute_force_w1d(a, b)))
    return _result("w1d_vs_brute_force", errs, 1e-9)


def check_swd_gradient(instances=20, seed=1, impl=None, spec=None):
    grad_fn = _impl(impl, "swd_gradient")
    rng = make_rng(seed)
    errs = []
    for _ in range(instances):
        n = int(rng.integers(3, 9))
        src, tgt, proj = random_point_pair(rng, n, n, "swd")
        pair = dsc.rank_pairings(src, tgt, proj)
        fd = finite_diff(lambda x: dsc.swd_frozen_objective(x, tgt, proj, pair), src, spec)
        errs.append(relative_error(grad_fn(src, tgt, proj), n * fd))
    return _result("swd_gradient", errs, GRAD_TOL)


def check_chamfer_gradient(instances=20, seed=2, impl=None, spec=None):
    grad_fn = _impl(impl, "chamfer_gradient")
    rng = make_rng(seed)
    errs = []
    for _ in range(instances):
        ns, nt = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        src, tgt, _ = random_point_pair(rng, ns, nt, "nn")
        fwd, _ = dsc.nearest_neighbors(src, tgt)
        rev, _ = dsc.nearest_neighbors(tgt, src)
        fd = finite_diff(lambda x: dsc.chamfer_frozen_objective(x, tgt, fwd, rev), src, spec)
        errs.append(relative_error(grad_fn(src, tgt), ns * fd))
    return _result("chamfer_gradient", errs, GRAD_TOL)


def check_icp_gradient(instances=20, seed=3, impl=None, spec=None):
    grad_fn = _impl(impl, "icp_gradient")
    rng = make_rng(seed)
    errs = []
    for _ in range(instances):
        ns, nt = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        src, tgt, _ = random_point_pair(rng, ns, nt, "nn")
        nn, _ = dsc.nearest_neighbors(src, tgt)
        fd = finite_diff(lambda x: dsc.icp_frozen_objective(x, tgt, nn), src, spec)
        errs.append(relative_error(grad_fn(src, tgt), ns * fd))
    return _result("icp_gradient", errs, GRAD_TOL)


def check_laplacian_gradient(instances=20, seed=4, impl=None, spec=None):
    """Umbrella field times 2 against finite differences on a uniform-valence mesh."""
    grad_fn = _impl(impl, "laplacian_gradient")
    rng = make_rng(seed)
    v, f = icosphere(0)
    adj = adjacency(TriMesh(v, f))
    errs = []
    for _ in range(instances):
        rest = v + rng.normal(scale=0.2, size=v.shape)
        disp = rng.normal(scale=0.3, size=v.shape)
        fd = finite_diff(lambda d: dsc.laplacian_energy(rest, d, adj), disp, spec)
        errs.append(relative_error(2.0 * grad_fn(rest, disp, adj), fd))
    return _result("laplacian_gradient", errs, GRAD_TOL, "documented factor 2 (uniform valence)")


def check_laplacian_partial(instances=20, seed=5, impl=None, spec=None):
    """Exact partial derivative on a mixed-valence mesh."""
    grad_fn = _impl(impl, "laplacian_partial")
    rng = make_rng(seed)
    v, f = icosphere(1)
    adj = adjacency(TriMesh(v, f))
    errs = []
    for _ in range(instances):
        rest = v + rng.normal(scale=0.05, size=v.shape)
        disp = rng.normal(scale=0.1, size=v.shape)
        fd = finite_diff(lambda d: dsc.laplacian_energy(rest, d, adj), disp, spec)
        errs.append(relative_error(grad_fn(rest, disp, adj), fd))
    return _result("laplacian_partial", errs, GRAD_TOL)


def check_potential_gradient(instances=20, seed=6, impl=None, spec=None):
    grad_fn = _impl(impl, "potential_gradient")
    rng = make_rng(seed)
    errs = []
    for i in range(instances):
        n = int(rng.integers(1, 6))
        if i % 2:
            pot = ("quadratic", rng.normal(size=3))
            x = rng.normal(size=(n, 3))
        else:
            pot = "rosenbrock2d"
            x = rng.normal(scale=0.8, size=(n, 2))
        fd = finite_diff(lambda p: fl.potential_value(pot, p), x, spec)
        errs.append(relative_error(grad_fn(pot, x), n * fd))
    return _result("potential_gradient", errs, GRAD_TOL)


def check_affine_chain_rule(instances=20, seed=7, impl=None, spec=None):
    grad_fn = _impl(impl, "swd_gradient")
    rng = make_rng(seed)
    errs = []
    while len(errs) < instances:
        n = int(rng.integers(4, 9))
        q, tgt, proj = random_point_pair(rng, n, n, "swd")
        params = AffineTransform(
            np.eye(3) + rng.normal(scale=0.1, size=(3, 3)), rng.normal(size=3)
        ).params()
        x0 = AffineTransform.from_params(params).apply(q)
        if not _rank_tie_free(x0, proj):
            continue
        pair = dsc.rank_pairings(x0, tgt, proj)

        def obj(p):
            return dsc.swd_frozen_objective(AffineTransform.from_params(p).apply(q), tgt, proj, pair)

        gA, gb = affine_gradients(grad_fn(x0, tgt, proj), q)
        analytic = np.concatenate([gA.ravel(), gb])
        errs.append(relative_error(analytic, finite_diff(obj, params, spec)))
    return _result("affine_chain_rule", errs, GRAD_TOL)


def check_adam_first_step(instances=20, seed=8, impl=None):
    """First discrete Adam step with eps = 0 is ``x0 - eta * sign(g)``."""
    rng = make_rng(seed)
    errs = []
    for _ in range(instances):
        x0 = rng.normal(size=5)
        c = rng.normal(size=5)
        alpha, beta = rng.uniform(0.0, 0.99, size=2)
        lr = float(rng.uniform(1e-3, 1.0))
        traj = discrete_adam_reference(lambda x: x - c, x0, alpha, beta, 0.0, lr, 1)
        expect = x0 - lr * np.sign(x0 - c)
        errs.append(float(np.max(np.abs(traj[1] - expect)) / max(1.0, np.max(np.abs(x0)))))
    # rounding in the bias-correction division only
    return _result("adam_first_step", errs, 1e-14)


def _adamflow_run(x0, cfg, grad_fn, n_steps, stepper):
    s = fl.ParticleState.initial(x0, cfg.h)
    traj = [s.X]
    for _ in range(n_steps):
        s = stepper(s, grad_fn(s.X), cfg)
        traj.append(s.X)
    return np.array(traj), s


def _quadratic(center):
    return lambda x: fl.potential_gradient(("quadratic", center), x)


def check_adam_richardson(impl=None, T=5.0, lr=0.1):
    """Endpoint error against the RK4 reference halves with ``h``."""
    stepper = _impl(impl, "adamflow_step")
    g = _quadratic(0.0)
    x0 = np.array([1.0])
    ref = fl.adam_ode_reference(g, x0, fl.FlowConfig(lr=lr), T, 40000)[1][-1]
    errs = []
    for h in (0.1, 0.05, 0.025):
        cfg = fl.FlowConfig(lr=lr, h=h)
        traj, _ = _adamflow_run(x0, cfg, g, round(T / h), stepper)
        errs.append(float(np.abs(traj[-1] - ref).max()))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    dev = [abs(r - 2.0) for r in ratios]
    detail = "ratios " + ", ".join(f"{r:.4f}" for r in ratios)
    return _result("adam_richardson_ratio", dev, 0.3, detail)


def check_adam_ode_tracking(impl=None, h=1e-4, T=1.0, lr=0.5):
    """Single particle on a potential objective against the RK4 reference."""
    stepper = _impl(impl, "adamflow_step")
    center = np.array([0.2, -0.1, 0.4])
    g = _quadratic(center)
    x0 = np.array([1.0, -0.5, 0.3])
    n = round(T / h)
    cfg = fl.FlowConfig(lr=lr, h=h)
    _, xs, _, _ = fl.adam_ode_reference(g, x0, cfg, T, n)
    traj, _ = _adamflow_run(x0, cfg, g, n, stepper)
    return _result("adam_ode_tracking", [float(np.abs(traj - xs).max())], 1e-3, f"h={h:g}")


def _run_to_convergence(stepper, h, lr, x0, m2_tol, t_max):
    """AdamFlow on the quadratic until ``mean |M|^2 < m2_tol``; Lyapunov values per step."""
    center = np.zeros(3)
    g = _quadratic(center)
    cfg = fl.FlowConfig(lr=lr, h=h)
    s = fl.ParticleState.initial(x0, h)
    vals = []
    m2 = np.inf
    while s.t < t_max:
        s = stepper(s, g(s.X), cfg)
        vals.append(lyapunov_value(s, cfg, fl.potential_value(("quadratic", center), s.X)))
        m2 = float(np.mean(np.sum(s.M**2, axis=1)))
        if m2 < m2_tol:
            break
    return np.array(vals), m2, s


def check_lyapunov(impl=None, lr=1e-2, burn_in=10, n_particles=20, seed=9, t_max=1000.0):
    """Lyapunov value non-increasing from burn-in to convergence, h in {0.1, 0.05, 0.025}."""
    stepper = _impl(impl, "adamflow_step")
    x0 = make_rng(seed).normal(size=(n_particles, 3))
    worst = []
    for h in (0.1, 0.05, 0.025):
        vals, _, _ = _run_to_convergence(stepper, h, lr, x0, 1e-6, t_max)
        inc = np.diff(vals[burn_in:])
        worst.append(max(0.0, float(inc.max())) if len(inc) else 0.0)
    # exact monotonicity: any increase fails
    return _result("lyapunov_descent", worst, 1e-300, "max increase per h in 0.1, 0.05, 0.025")


def check_moment_decay(impl=None, lr=1e-2, h=0.1, n_particles=20, seed=9, t_max=1000.0):
    """``mean |M|^2`` drops below 1e-6 within ``t_max``."""
    stepper = _impl(impl, "adamflow_step")
    x0 = make_rng(seed).normal(size=(n_particles, 3))
    _, m2, s = _run_to_convergence(stepper, h, lr, x0, 1e-6, t_max)
    return _result("moment_decay", [m2], 1e-6, f"converged at t={s.t:g}")


CHECKS = {
    "w1d_vs_brute_force": check_w1d,
    "swd_gradient": check_swd_gradient,
    "chamfer_gradient": check_chamfer_gradient,
    "icp_gradient": check_icp_gradient,
    "laplacian_gradient": check_laplacian_gradient,
    "laplacian_partial": check_laplacian_partial,
    "potential_gradient": check_potential_gradient,
    "affine_chain_rule": check_affine_chain_rule,
    "adam_first_step": check_adam_first_step,
    "adam_richardson_ratio": check_adam_richardson,
    "adam_ode_tracking": check_adam_ode_tracking,
    "lyapunov_descent": check_lyapunov,
    "moment_decay": check_moment_decay,
}


def run_verification(impl=None, only=None):
    """Run every oracle check (or the named subset) and return the results."""
    names = list(CHECKS) if only is None else list(only)
    return [CHECKS[n](impl=impl) for n in names]


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  {'max_error':>11}  {'tol':>8}  n"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<{width}}  {status:<6}  {r.max_error:11.3e}  {r.tolerance:8.1e}  {r.instances}"
            + (f"  {r.detail}" if r.detail else "")
        )
    return "\n".join(lines)
