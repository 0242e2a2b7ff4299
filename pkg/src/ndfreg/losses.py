"""The five terms of the registration loss and their weighted total.

Similarity is one minus global normalized cross correlation over the
sampled batch, summed across observed follow-up times.  The zero-time
anchor is the mean squared displacement norm at t=0.  Spatial, temporal
and monotonic regularizers are evaluated on a sampled time grid that
includes unobserved times.  All reductions over points are means, so the
weights keep their meaning regardless of batch size.

Public functions are plain numpy (handy as oracles and for reporting);
the `*_node` builders express the same math as tape primitives so the
trainer can differentiate the total with respect to the parameters.
Terms whose weight is zero are skipped and reported as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Tape
from . import network as net
from .volume import sample_trilinear

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "ncc_loss",
    "zero_time_anchor",
    "spatial_loss",
    "temporal_loss",
    "monotonic_loss",
    "total_loss",
    "build_total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0  # zero-time anchor
    alpha: float = 1.0  # spatial
    beta: float = 1.0  # temporal
    gamma: float = 0.1  # monotonic

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    sim: float = 0.0
    zero_anchor: float = 0.0
    spatial: float = 0.0
    temporal: float = 0.0
    monotonic: float = 0.0
    total: float = 0.0

    FIELDS = ("sim", "zero_anchor", "spatial", "temporal", "monotonic", "total")


# ---------------------------------------------------------------------------
# plain numpy forms
# ---------------------------------------------------------------------------


def ncc_loss(fixed_values, warped_values) -> float:
    """1 - NCC over the batch; degenerate variance returns 1 unless both
    sides are constant and equal (then 0)."""
    f = np.asarray(fixed_values, dtype=np.float64)
    m = np.asarray(warped_values, dtype=np.float64)
    if f.shape != m.shape:
        raise ValueError(f"length mismatch: {f.shape} vs {m.shape}")
    if f.size == 0:
        raise ValueError("empty value batch")
    fc = f - f.mean()
    mc = m - m.mean()
    fvar = float(fc @ fc)
    mvar = float(mc @ mc)
    if fvar == 0.0 or mvar == 0.0:
        return 0.0 if np.array_equal(f, m) else 1.0
    return 1.0 - float(fc @ mc) / np.sqrt(fvar * mvar)


def zero_time_anchor(displacements) -> float:
    """Mean squared Euclidean norm over a (3,B) displacement batch."""
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != 3 or d.shape[1] == 0:
        raise ValueError(f"expected nonempty (3,B) batch, got {d.shape}")
    return float((d * d).sum(axis=0).mean())


def spatial_loss(jacobians, penalize_raw: bool = False) -> float:
    """Mean over points of the squared Frobenius norm of J - I (or of raw
    J when `penalize_raw`, the literal reading that also penalizes the
    identity transform)."""
    j = np.asarray(jacobians, dtype=np.float64)
    if j.ndim != 3 or j.shape[:2] != (3, 3):
        raise ValueError(f"expected (3,3,B) Jacobian batch, got {j.shape}")
    if not penalize_raw:
        j = j - np.eye(3)[:, :, None]
    return float((j * j).sum(axis=(0, 1)).mean())


def temporal_loss(dphi_dt) -> float:
    """Mean squared norm of (3,N) temporal derivatives over all samples."""
    d = np.asarray(dphi_dt, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != 3 or d.shape[1] == 0:
        raise ValueError(f"expected nonempty (3,N) batch, got {d.shape}")
    return float((d * d).sum(axis=0).mean())


def monotonic_loss(djdt_samples) -> float:
    """Per point: the smaller of the summed positive and summed negative
    parts of d|J|/dt over the time grid; mean over points.  Zero exactly
    when every point's samples keep one sign."""
    d = np.asarray(djdt_samples, dtype=np.float64)
    if d.ndim == 1:
        d = d[:, None]
    if d.shape[0] < 2:
        raise ValueError(f"need >= 2 time samples per point, got {d.shape[0]}")
    pos = np.maximum(d, 0.0).sum(axis=0)
    neg = np.maximum(-d, 0.0).sum(axis=0)
    return float(np.minimum(pos, neg).mean())


# ---------------------------------------------------------------------------
# tape builders
# ---------------------------------------------------------------------------


def ncc_node(tape: Tape, fixed_values: np.ndarray, warped):
    fv = np.asarray(fixed_values, dtype=tape.dtype)
    mv = warped.value
    if fv.shape != mv.shape:
        raise ValueError(f"length mismatch: {fv.shape} vs {mv.shape}")
    fc = fv - fv.mean()
    if float(fc @ fc) == 0.0 or float(np.var(mv)) == 0.0:
        return tape.constant(0.0 if np.array_equal(fv, mv) else 1.0)
    fixed_c = tape.constant(fc)
    mc = tape.sub(warped, tape.mean(warped))
    num = tape.sum(tape.mul(fixed_c, mc))
    den = tape.sqrt(
        tape.mul(tape.constant(float(fc @ fc)), tape.sum(tape.square(mc)))
    )
    return tape.offset(tape.scale(tape.div(num, den), -1.0), 1.0)


def anchor_node(tape: Tape, displacement):
    return tape.mean(tape.sum(tape.square(displacement), axis=0))


def sum_of_squares(tape: Tape, node):
    return tape.sum(tape.square(node))


def monotonic_node(tape: Tape, djdt_nodes: list):
    if len(djdt_nodes) < 2:
        raise ValueError("monotonic term needs >= 2 time samples")
    pos = neg = None
    for d in djdt_nodes:
        p = tape.relu(d)
        n = tape.relu(tape.scale(d, -1.0))
        pos = p if pos is None else tape.add(pos, p)
        neg = n if neg is None else tape.add(neg, n)
    return tape.mean(tape.minimum(pos, neg))


def build_total_loss(
    tape: Tape,
    leaves: net.Leaves,
    series,
    weights: LossWeights,
    plan,
    config: net.NetworkConfig,
    spatial_raw: bool = False,
):
    """Record the full loss on the tape; returns (total node, breakdown).

    `plan` supplies `coords` (3,B), `observed_times` (normalized, first
    entry 0) and `reg_grid` (normalized times for the regularizers).
    """
    if not series.followups:
        raise ValueError("series has no follow-up scan")
    coords = np.asarray(plan.coords, dtype=tape.dtype)
    nbatch = coords.shape[1]

    value_req = net.DerivativeRequest()
    tr0 = net.trace_network(tape, leaves, coords, 0.0, config, value_req)
    anchor = anchor_node(tape, tr0.displacement.value)

    fixed_vals, _ = sample_trilinear(series.baseline, coords)
    sim = None
    for (months, vol), t in zip(series.followups, plan.observed_times[1:]):
        tr = net.trace_network(tape, leaves, coords, t, config, value_req)
        px, py, pz = (tape.row(tr.phi, i) for i in range(3))
        warped = tape.sample3(vol.values, px, py, pz)
        term = ncc_node(tape, fixed_vals, warped)
        sim = term if sim is None else tape.add(sim, term)

    need_spatial = weights.alpha > 0
    need_temporal = weights.beta > 0
    need_mono = weights.gamma > 0
    spatial = temporal = mono = None
    if need_spatial or need_temporal or need_mono:
        req = net.DerivativeRequest(
            spatial=need_spatial or need_mono,
            temporal=need_temporal or need_mono,
            jacdet=need_mono or (need_spatial and spatial_raw),
            jacdet_dt=need_mono,
        )
        kgrid = len(plan.reg_grid)
        djdt_nodes = []
        sp_acc = tp_acc = None
        for t in plan.reg_grid:
            tr = net.trace_network(tape, leaves, coords, float(t), config, req)
            if need_spatial:
                parts = tr.jac_entries if spatial_raw else tr.disp_grads
                for p in parts:
                    s = sum_of_squares(tape, p)
                    sp_acc = s if sp_acc is None else tape.add(sp_acc, s)
            if need_temporal:
                s = sum_of_squares(tape, tr.dphi_dt)
                tp_acc = s if tp_acc is None else tape.add(tp_acc, s)
            if need_mono:
                djdt_nodes.append(tr.jac_det_dt)
        if need_spatial:
            spatial = tape.scale(sp_acc, 1.0 / (kgrid * nbatch))
        if need_temporal:
            temporal = tape.scale(tp_acc, 1.0 / (kgrid * nbatch))
        if need_mono:
            mono = monotonic_node(tape, djdt_nodes)

    total = sim
    if weights.lam > 0:
        total = tape.add(total, tape.scale(anchor, weights.lam))
    if spatial is not None:
        total = tape.add(total, tape.scale(spatial, weights.alpha))
    if temporal is not None:
        total = tape.add(total, tape.scale(temporal, weights.beta))
    if mono is not None:
        total = tape.add(total, tape.scale(mono, weights.gamma))

    breakdown = LossBreakdown(
        sim=float(sim.value),
        zero_anchor=float(anchor.value),
        spatial=0.0 if spatial is None else float(spatial.value),
        temporal=0.0 if temporal is None else float(temporal.value),
        monotonic=0.0 if mono is None else float(mono.value),
        total=float(total.value),
    )
    return total, breakdown


def total_loss(
    series,
    state: net.NetworkState,
    weights: LossWeights,
    plan,
    spatial_raw: bool = False,
    dtype=np.float64,
) -> LossBreakdown:
    """Evaluate the full loss for a frozen state (no gradients kept)."""
    tape = Tape(dtype)
    leaves = net.make_leaves(tape, state, trainable=False)
    _, breakdown = build_total_loss(
        tape, leaves, series, weights, plan, state.config, spatial_raw=spatial_raw
    )
    return breakdown
