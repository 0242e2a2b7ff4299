"""Per-subject fitting loop and inference-time dense field generation.

Each iteration samples a fresh coordinate batch and regularization time
grid, records the full loss on a tape, runs the reverse sweep, and takes
one optimizer step.  Similarity is evaluated at observed times only; the
regularizers run on the sampled grid, which includes unobserved times and
may extend past the last observed scan (t_extrap > 1).

With a fixed seed and single-threaded BLAS the loop is reproducible to
bit-identical parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .diffengine import Tape
from . import network as net
from .losses import LossWeights, LossBreakdown, build_total_loss
from .volume import Volume3D, Volume4DSeries, grid_coordinates, trilinear_values_and_grads

__all__ = [
    "FitConfig",
    "FitReport",
    "SamplePlan",
    "AdamState",
    "NumericalAbortError",
    "sample_plan",
    "adam_step",
    "fit",
    "predict_field",
    "warp_volume",
    "FieldGrid",
]

log = logging.getLogger(__name__)

_DTYPES = {"f64": np.float64, "f32": np.float32}


class NumericalAbortError(RuntimeError):
    """Two consecutive non-finite totals; carries a diagnostic dump."""

    def __init__(self, iteration: int, breakdown: LossBreakdown):
        super().__init__(
            f"non-finite total loss at iterations {iteration - 1} and {iteration}: "
            f"{breakdown}"
        )
        self.iteration = iteration
        self.breakdown = breakdown


@dataclass
class FitConfig:
    iterations: int = 20000
    batch_points: int = 8192
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    reg_time_grid_size: int = 8
    t_extrap: float = 1.0
    time_horizon: float | None = None  # None: largest observed months
    seed: int = 0
    precision: str = "f64"
    log_every: int = 100
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    optimizer: str = "adam"
    spatial_raw: bool = False
    mask: np.ndarray | None = None
    network: net.NetworkConfig = field(default_factory=net.NetworkConfig)

    def validate(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_points <= 0:
            raise ValueError("batch_points must be positive")
        if self.reg_time_grid_size < 2:
            raise ValueError("regularization time grid needs >= 2 points")
        if self.t_extrap < 1.0:
            raise ValueError("t_extrap must be >= 1")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.network.validate()

    def echo(self) -> dict:
        d = asdict(self)
        d["mask"] = None if self.mask is None else "provided"
        return d


@dataclass
class SamplePlan:
    coords: np.ndarray  # (3, B) in [-1,1]^3
    observed_times: np.ndarray  # normalized, first entry 0
    reg_grid: np.ndarray  # normalized, endpoints {0, t_extrap} forced


def sample_plan(
    series: Volume4DSeries,
    config: FitConfig,
    rng: np.random.Generator,
    t_max: float | None = None,
    mask_points: np.ndarray | None = None,
) -> SamplePlan:
    """Draw one iteration's coordinate batch and time grids."""
    t_max = t_max or config.time_horizon or max(series.times)
    nb = config.batch_points
    if config.mask is None:
        coords = rng.uniform(-1.0, 1.0, size=(3, nb))
    else:
        if mask_points is None:
            mask_points = mask_voxel_centers(config.mask)
        pick = rng.integers(0, mask_points.shape[1], size=nb)
        half = 1.0 / (np.array(config.mask.shape, dtype=np.float64) - 1.0)
        jitter = rng.uniform(-1.0, 1.0, size=(3, nb)) * half[:, None]
        coords = np.clip(mask_points[:, pick] + jitter, -1.0, 1.0)
    observed = np.asarray(series.times, dtype=np.float64) / t_max
    k = config.reg_time_grid_size
    if k == 2:
        interior = np.empty(0)
    else:
        interior = np.sort(rng.uniform(0.0, config.t_extrap, size=k - 2))
    grid = np.concatenate(([0.0], interior, [config.t_extrap]))
    return SamplePlan(coords, observed, grid)


def mask_voxel_centers(mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask > 0).T.astype(np.float64)
    if idx.shape[1] == 0:
        raise ValueError("mask selects no voxels")
    scale = 2.0 / (np.array(mask.shape, dtype=np.float64) - 1.0)
    return idx * scale[:, None] - 1.0


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, config: FitConfig):
    """Bias-corrected Adam update in place; a non-finite gradient rejects
    the whole step and leaves parameters and moments untouched."""
    for g in grads:
        if not np.isfinite(g).all():
            log.warning("step %d rejected: non-finite gradient", state.step + 1)
            return state, False
    state.step += 1
    if config.optimizer == "sgd":
        for p, g in zip(params, grads):
            p -= config.learning_rate * g
        return state, True
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return state, True


@dataclass
class IterationLog:
    iteration: int
    breakdown: LossBreakdown
    wall_ms: float


@dataclass
class FitReport:
    history: list
    wall_time_s: float
    final_checksum: str
    config_echo: dict

    def to_rows(self):
        hdr = ["iteration"] + list(LossBreakdown.FIELDS) + ["wall_ms"]
        rows = [hdr]
        for entry in self.history:
            b = entry.breakdown
            rows.append(
                [entry.iteration]
                + [getattr(b, f) for f in LossBreakdown.FIELDS]
                + [entry.wall_ms]
            )
        return rows


def fit(series: Volume4DSeries, config: FitConfig):
    """Optimize a fresh network on one subject; returns (state, report)."""
    config.validate()
    if not series.followups:
        raise ValueError("series needs at least one follow-up scan")
    t_max = config.time_horizon or max(series.times)
    if t_max <= 0:
        raise ValueError("time horizon must be positive")
    dtype = _DTYPES[config.precision]

    state = net.init_network(
        seed=config.seed, config=config.network, dtype=dtype, time_horizon=t_max
    )
    params = state.param_arrays()
    opt = AdamState.zeros_like(params)
    rng = np.random.default_rng([config.seed, 0x5EED])
    mask_points = None if config.mask is None else mask_voxel_centers(config.mask)

    history = []
    started = time.perf_counter()
    nonfinite_streak = 0
    for it in range(1, config.iterations + 1):
        tape = Tape(dtype)
        leaves = net.make_leaves(tape, state)
        plan = sample_plan(series, config, rng, t_max, mask_points)
        total, breakdown = build_total_loss(
            tape, leaves, series, config.weights, plan, config.network,
            spatial_raw=config.spatial_raw,
        )
        if not np.isfinite(breakdown.total):
            nonfinite_streak += 1
            log.warning("iteration %d: non-finite total %s", it, breakdown)
            if nonfinite_streak >= 2:
                raise NumericalAbortError(it, breakdown)
            continue
        nonfinite_streak = 0
        tape.backward(total)
        grads = [
            leaf.adjoint if leaf.adjoint is not None else np.zeros_like(leaf.value)
            for leaf in leaves.flat()
        ]
        opt, _ = adam_step(params, grads, opt, config)
        if (it - 1) % config.log_every == 0:
            wall_ms = (time.perf_counter() - started) * 1e3
            history.append(IterationLog(it, breakdown, wall_ms))
        if (
            config.checkpoint_every > 0
            and config.checkpoint_dir is not None
            and it % config.checkpoint_every == 0
        ):
            from .fileio import save_model

            save_model(f"{config.checkpoint_dir}/checkpoint_{it:07d}.ndf", state)

    report = FitReport(
        history=history,
        wall_time_s=time.perf_counter() - started,
        final_checksum=state.checksum(),
        config_echo=config.echo(),
    )
    return state, report


@dataclass
class FieldGrid:
    """Dense field products sampled on the voxel grid at one time."""

    t_months: float
    dims: tuple
    displacement: np.ndarray  # (3, nx, ny, nz)
    jac_det: np.ndarray  # (nx, ny, nz)
    jac_det_dt: np.ndarray | None = None

    @property
    def phi(self) -> np.ndarray:
        return self.displacement + grid_coordinates(self.dims).reshape(
            (3,) + tuple(self.dims)
        )

    @property
    def folded_count(self) -> int:
        return int((self.jac_det <= 0.0).sum())


def predict_field(
    state: net.NetworkState,
    t_months: float,
    dims,
    chunk_size: int = 16384,
    want_djdt: bool = False,
) -> FieldGrid:
    """Evaluate the fitted field densely over the voxel grid in chunks;
    chunking is pure partitioning (results are identical to one pass)."""
    tnorm = t_months / state.time_horizon
    request = net.DerivativeRequest(
        spatial=True, temporal=want_djdt, jacdet=True, jacdet_dt=want_djdt
    )
    coords = grid_coordinates(dims)
    n = coords.shape[1]
    disp = np.empty((3, n))
    jac = np.empty(n)
    djdt = np.empty(n) if want_djdt else None
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        res = net.forward_with_derivatives(state, coords[:, lo:hi], tnorm, request)
        disp[:, lo:hi] = res.displacement
        jac[lo:hi] = res.jac_det
        if want_djdt:
            djdt[lo:hi] = res.jac_det_dt
    dims = tuple(dims)
    return FieldGrid(
        t_months=t_months,
        dims=dims,
        displacement=disp.reshape((3,) + dims),
        jac_det=jac.reshape(dims),
        jac_det_dt=None if djdt is None else djdt.reshape(dims),
    )


def warp_volume(vol: Volume3D, phi) -> Volume3D:
    """Backward-map a volume: sample `vol` at phi(voxel) for every voxel."""
    if isinstance(phi, FieldGrid):
        if tuple(phi.dims) != tuple(vol.dims):
            raise ValueError(f"field dims {phi.dims} != volume dims {vol.dims}")
        phi = phi.phi
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (3,) + tuple(vol.dims):
        raise ValueError(f"phi shape {phi.shape} does not match volume {vol.dims}")
    vals, _ = trilinear_values_and_grads(vol.values, phi.reshape(3, -1))
    return Volume3D(vals.reshape(vol.dims), spacing=vol.spacing, meta=dict(vol.meta))
