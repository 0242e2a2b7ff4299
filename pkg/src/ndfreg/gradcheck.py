"""Finite-difference verification suites behind the gradcheck command.

Every analytic quantity the engine produces is compared against central
finite differences (or a permutation-expansion determinant) at a toy
scale.  64-bit tolerances are stricter than 32-bit ones.  The `corrupt`
hook multiplies one named analytic term by 1.001 before comparison, so
tests can prove the harness actually catches a wrong derivative.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import network as net
from .diffengine import Tape
from .losses import LossWeights, build_total_loss, total_loss
from .trainer import SamplePlan
from .volume import Volume3D, Volume4DSeries, trilinear_values_and_grads

__all__ = ["CheckResult", "run_gradcheck"]

_TOLS = {
    "f64": {
        "cofactor-determinant": 1e-12,
        "spatial-tangents": 1e-5,
        "temporal-tangent": 1e-5,
        "jacdet-dt": 1e-4,
        "sampler-gradient": 1e-6,
        "parameter-gradients": 1e-4,
    },
    "f32": {
        "cofactor-determinant": 1e-5,
        "spatial-tangents": 1e-2,
        "temporal-tangent": 1e-2,
        "jacdet-dt": 1e-2,
        "sampler-gradient": 1e-3,
        "parameter-gradients": 5e-2,
    },
}


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    passed: bool


def _rel(analytic, reference, floor):
    return np.abs(analytic - reference) / np.maximum(np.abs(reference), floor)


def _bump(values, name, corrupt):
    return values * 1.001 if corrupt == name else values


def _toy_state(seed, width, dtype):
    cfg = net.NetworkConfig(
        hidden_width=width, depth=5, time_hidden_width=6, time_embed_width=16
    )
    state = net.init_network(seed=seed, config=cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for w, b in state.psi + state.theta:
        w *= 3.0  # O(0.1) displacements: FD ratios stay well-conditioned
        b[:] = rng.uniform(-0.3, 0.3, size=b.shape)
    if dtype == np.float32:
        state.psi = [(w.astype(dtype), b.astype(dtype)) for w, b in state.psi]
        state.theta = [(w.astype(dtype), b.astype(dtype)) for w, b in state.theta]
    return state


def run_gradcheck(seed=0, width=16, points=200, precision="f64", corrupt=None):
    dtype = np.float64 if precision == "f64" else np.float32
    tols = _TOLS[precision]
    # f32 step balances truncation (omega0-scaled third derivatives)
    # against roundoff; the f32 floor keeps near-zero entries from turning
    # roundoff into fake relative error
    fd_h = 1e-5 if precision == "f64" else 3e-3
    floor = 1e-6 if precision == "f64" else 1e-2
    rng = np.random.default_rng(seed)
    results = []

    # 1. cofactor determinant vs permutation expansion
    worst = 0.0
    for _ in range(200):
        m = rng.uniform(-1, 1, size=(3, 3)).astype(dtype)
        tape = Tape(dtype)
        got = float(tape.det3([tape.constant(v) for v in m.ravel()]).value)
        expect = 0.0
        for perm in itertools.permutations(range(3)):
            sign = 1
            p = list(perm)
            for i in range(3):
                for j in range(i + 1, 3):
                    if p[i] > p[j]:
                        sign = -sign
            expect += sign * float(m[0, perm[0]]) * float(m[1, perm[1]]) * float(
                m[2, perm[2]]
            )
        got = got * 1.001 if corrupt == "det" else got
        worst = max(worst, abs(got - expect))
    results.append(
        CheckResult("cofactor-determinant", worst, tols["cofactor-determinant"],
                    worst <= tols["cofactor-determinant"])
    )

    state = _toy_state(seed, width, dtype)
    coords = rng.uniform(-0.9, 0.9, size=(3, points)).astype(dtype)
    t0 = 0.37
    full = net.DerivativeRequest(spatial=True, temporal=True, jacdet=True, jacdet_dt=True)
    res = net.forward_with_derivatives(state, coords, t0, full, dtype=dtype)

    # 2. spatial Jacobian
    worst = 0.0
    for j in range(3):
        shift = np.zeros((3, 1), dtype=dtype)
        shift[j] = fd_h
        fp = net.forward_with_derivatives(
            state, coords + shift, t0, net.DerivativeRequest(), dtype=dtype).phi
        fm = net.forward_with_derivatives(
            state, coords - shift, t0, net.DerivativeRequest(), dtype=dtype).phi
        fd = (fp - fm) / (2 * fd_h)
        an = _bump(res.spatial_jacobian[:, j, :], "spatial", corrupt)
        worst = max(worst, float(_rel(an, fd, floor).max()))
    results.append(
        CheckResult("spatial-tangents", worst, tols["spatial-tangents"],
                    worst <= tols["spatial-tangents"])
    )

    # 3. temporal derivative
    fp = net.forward_with_derivatives(
        state, coords, t0 + fd_h, net.DerivativeRequest(), dtype=dtype).displacement
    fm = net.forward_with_derivatives(
        state, coords, t0 - fd_h, net.DerivativeRequest(), dtype=dtype).displacement
    fd = (fp - fm) / (2 * fd_h)
    an = _bump(res.temporal_derivative, "temporal", corrupt)
    worst = float(_rel(an, fd, floor).max())
    results.append(
        CheckResult("temporal-tangent", worst, tols["temporal-tangent"],
                    worst <= tols["temporal-tangent"])
    )

    # 4. d|J|/dt via Jacobi's formula
    jr = net.DerivativeRequest(spatial=True, jacdet=True)
    h2 = 1e-4 if precision == "f64" else 3e-2
    jp = net.forward_with_derivatives(state, coords, t0 + h2, jr, dtype=dtype).jac_det
    jm = net.forward_with_derivatives(state, coords, t0 - h2, jr, dtype=dtype).jac_det
    fd = (jp - jm) / (2 * h2)
    an = _bump(res.jac_det_dt, "jacdet_dt", corrupt)
    worst = float(_rel(an, fd, 1e-5 if precision == "f64" else 1e-3).max())
    results.append(
        CheckResult("jacdet-dt", worst, tols["jacdet-dt"], worst <= tols["jacdet-dt"])
    )

    # 5. trilinear sampler gradient, interior points away from cell faces
    grid = rng.uniform(0, 1, size=(9, 9, 9))
    base = rng.uniform(-0.9, 0.9, size=(3, points))
    vox = (base + 1) * 4.0
    frac = vox - np.floor(vox)
    pts = base[:, ((frac > 0.05) & (frac < 0.95)).all(axis=0)]
    _, grads = trilinear_values_and_grads(grid, pts)
    grads = _bump(grads, "sampler", corrupt)
    worst = 0.0
    for d in range(3):
        shift = np.zeros((3, 1))
        shift[d] = 1e-6
        vp, _ = trilinear_values_and_grads(grid, pts + shift)
        vm, _ = trilinear_values_and_grads(grid, pts - shift)
        fd = (vp - vm) / 2e-6
        worst = max(worst, float(_rel(grads[d], fd, 1e-3).max()))
    results.append(
        CheckResult("sampler-gradient", worst, tols["sampler-gradient"],
                    worst <= tols["sampler-gradient"])
    )

    # 6. parameter gradients of the full loss on a tiny series
    worst = _param_gradient_worst(seed, corrupt, precision)
    results.append(
        CheckResult("parameter-gradients", worst, tols["parameter-gradients"],
                    worst <= tols["parameter-gradients"])
    )
    return results


def _param_gradient_worst(seed, corrupt, precision):
    rng = np.random.default_rng(seed + 7)
    base = Volume3D(rng.uniform(0, 1, size=(6, 6, 6)))
    f1 = Volume3D(np.clip(base.values + rng.uniform(-0.05, 0.05, base.dims), 0, 1))
    series = Volume4DSeries(base, [(12.0, f1)])
    cfg = net.NetworkConfig(
        hidden_width=4, depth=2, time_hidden_width=4, time_embed_width=6
    )
    state = net.init_network(seed=seed, config=cfg)
    for w, b in state.psi + state.theta:
        w *= 3.0
        b[:] = rng.uniform(-0.3, 0.3, size=b.shape)
    plan = SamplePlan(
        coords=rng.uniform(-0.8, 0.8, size=(3, 5)),
        observed_times=np.array([0.0, 1.0]),
        reg_grid=np.linspace(0, 1, 3),
    )
    weights = LossWeights(lam=2.0, alpha=0.5, beta=0.5, gamma=0.3)

    tape = Tape()
    leaves = net.make_leaves(tape, state)
    total, _ = build_total_loss(tape, leaves, series, weights, plan, cfg)
    tape.backward(total)
    grads = [
        l.adjoint if l.adjoint is not None else np.zeros_like(l.value)
        for l in leaves.flat()
    ]
    if corrupt == "params":
        grads = [g * 1.001 for g in grads]

    eps = 1e-6 if precision == "f64" else 1e-3
    worst = 0.0
    params = state.param_arrays()
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            vp = total_loss(series, state, weights, plan).total
            flat[i] = orig - eps
            vm = total_loss(series, state, weights, plan).total
            flat[i] = orig
            fd = (vp - vm) / (2 * eps)
            an = grads[pi].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-6))
    return worst
