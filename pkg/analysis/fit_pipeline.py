import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.interpolate import RectBivariateSpline

from analysis.errors import FitError, SpecError
from analysis.experiment_schedules import pauli_states
from analysis.pulse_control import U3Params
from utils.data_loader import ExperimentKind, ExperimentRecord

log = logging.getLogger(__name__)

PARAM_NAMES = ("g_x", "omega_c_x", "g_z", "omega_c_z", "b", "gamma_max")

# (axis1, axis2) per step, each (name, low, high, scale)
DEFAULT_RANGES = {
    "I": (("omega_c_x", 0.5, 3.0, "linear"), ("g_x", 0.0, 1e-2, "linear")),
    "II": (("omega_c_z", 1e-3, 5e-2, "linear"), ("g_z", 0.0, 2e-2, "linear")),
    "III": (("gamma_max", 1e-3, 0.2, "log"), ("b", 1e-5, 2e-3, "log")),
}

ONE = U3Params(np.pi, 0.0, 0.0)
PLUS = U3Params(np.pi / 2.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class SweepAxis:
    name: str
    values: np.ndarray
    scale: str = "linear"
    units: str = "GHz"

    @classmethod
    def build(cls, name, low, high, scale, resolution):
        if resolution < 2:
            raise SpecError(f"sweep resolution must be at least 2, got {resolution}")
        if scale == "log":
            if low <= 0:
                raise SpecError(f"log-spaced axis {name} needs a positive lower bound")
            values = np.geomspace(low, high, resolution)
        elif scale == "linear":
            values = np.linspace(low, high, resolution)
        else:
            raise SpecError(f"unknown axis scale '{scale}'")
        return cls(name=name, values=values, scale=scale)

    def coords(self, values=None):
        values = self.values if values is None else np.asarray(values, dtype=float)
        return np.log10(values) if self.scale == "log" else values

    def from_coords(self, coords):
        return 10.0 ** coords if self.scale == "log" else coords

    def cell_width(self, value):
        """Width of the grid cell containing value, in the axis units."""
        i = int(np.clip(np.searchsorted(self.values, value), 1, len(self.values) - 1))
        return float(self.values[i] - self.values[i - 1])


@dataclass(frozen=True, eq=False)
class CostSurface:
    step: str
    axis1: SweepAxis
    axis2: SweepAxis
    cost: np.ndarray

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=float)
        if cost.shape != (len(self.axis1.values), len(self.axis2.values)):
            raise SpecError(f"cost shape {cost.shape} does not match the sweep axes")
        if not np.all(np.isfinite(cost)) or np.any(cost < 0):
            raise SpecError("cost surface must be finite and non-negative")
        object.__setattr__(self, "cost", cost)

    def best_cell(self):
        # First argmin in row-major order: ties go to the smaller parameter values
        i, j = np.unravel_index(int(np.argmin(self.cost)), self.cost.shape)
        return i, j

    def to_frame(self):
        p1, p2 = np.meshgrid(self.axis1.values, self.axis2.values, indexing="ij")
        return pd.DataFrame({self.axis1.name: p1.ravel(), self.axis2.name: p2.ravel(), "cost": self.cost.ravel()})


@dataclass(frozen=True)
class Minimum:
    p1: float
    p2: float
    cost: float
    converged: bool = True


@dataclass(frozen=True, eq=False)
class FitResult:
    g_x: float
    omega_c_x: float
    g_z: float
    omega_c_z: float
    b: float = 0.0
    gamma_max: float = 0.0
    fixed: dict = field(default_factory=dict)
    surfaces: tuple = ()
    minima: tuple = ()
    label: str = "full"

    @classmethod
    def from_noise(cls, noise, label="full"):
        fl = noise.fluctuators
        return cls(g_x=noise.x.g, omega_c_x=noise.x.omega_c, g_z=noise.z.g, omega_c_z=noise.z.omega_c,
                   b=fl.b if fl else 0.0, gamma_max=fl.gamma_max if fl else 0.0, label=label)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def noise_model(self, base):
        params = self.params()
        if not self.b:
            params.pop("b")
            params.pop("gamma_max")
            return base.with_params(**params).without_fluctuators()
        return base.with_params(**params)

    def report_text(self):
        lines = [f"# noise-model fit ({self.label})", "[parameters] (GHz)"]
        lines += [f"{name} = {value:.6g}" for name, value in self.params().items()]
        lines.append("[fixed]")
        lines += [f"{name} = {value:.6g}" for name, value in self.fixed.items()]
        for surface, minimum in zip(self.surfaces, self.minima):
            a1, a2 = surface.axis1, surface.axis2
            lines.append(f"[step {surface.step}]")
            lines.append(f"{a1.name} range = [{a1.values[0]:.6g}, {a1.values[-1]:.6g}] ({a1.scale}, "
                         f"{len(a1.values)} points, cell {a1.cell_width(minimum.p1):.3g})")
            lines.append(f"{a2.name} range = [{a2.values[0]:.6g}, {a2.values[-1]:.6g}] ({a2.scale}, "
                         f"{len(a2.values)} points, cell {a2.cell_width(minimum.p2):.3g})")
            lines.append(f"grid minimum cost = {surface.cost.min():.6g}")
            lines.append(f"refined {a1.name} = {minimum.p1:.6g}, {a2.name} = {minimum.p2:.6g}, "
                         f"cost = {minimum.cost:.6g}{'' if minimum.converged else ' (not converged)'}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, prefix="fit"):
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, f"{prefix}_report.txt")]
        with open(paths[0], "w") as handle:
            handle.write(self.report_text())
        for surface in self.surfaces:
            path = os.path.join(out_dir, f"{prefix}_surface_step{surface.step}.csv")
            surface.to_frame().to_csv(path, index=False)
            paths.append(path)
        return paths


def cost(sim, exp):
    if not sim.same_grid(exp):
        raise SpecError("cost needs simulated and experimental curves on the same instants")
    diff = sim.mean - exp.mean
    return float(np.sqrt(np.sum(diff**2)) / len(diff))


def require_curves(dataset, kind, states):
    kind = ExperimentKind(kind)
    missing = [f"{kind.value} {u3.key()}" for u3 in states if (kind.value, u3.key()) not in dataset]
    if missing:
        raise FitError("dataset lacks required curves", missing)
    return [dataset[(kind.value, u3.key())] for u3 in states]


def step_targets(step, step2_kind="dd"):
    """(kind, states) each step is fitted against."""
    if step == "I":
        return ExperimentKind.FREE, [ONE]
    if step == "II":
        return ExperimentKind(step2_kind), pauli_states()
    if step == "III":
        return ExperimentKind.FREE, [PLUS]
    raise SpecError(f"unknown fit step '{step}'")


def fix_params(step, base, p1, p2):
    if step == "I":
        return base.with_params(omega_c_x=p1, g_x=p2)
    if step == "II":
        return base.with_params(omega_c_z=p1, g_z=p2)
    return base.with_params(gamma_max=p1, b=p2)


def step_noise(step, base, p1, p2):
    """Noise model of one sweep point: Step I sees only the x channel, Step II no fluctuators."""
    noise = fix_params(step, base, p1, p2)
    if step == "I":
        return noise.x_only()
    if step == "II":
        return noise.without_fluctuators()
    return noise


def _axes(step, ranges, resolution):
    spec = (ranges or {}).get(step, DEFAULT_RANGES[step])
    return tuple(SweepAxis.build(*axis, resolution) for axis in spec)


def sweep_grid(step, dataset, model, base, ranges=None, resolution=None, n_traj=None, workers=None,
               step2_kind="dd"):
    """Cost over a 2-D parameter grid for one fitting step; points evaluated in parallel."""
    resolution = resolution or model.run.resolution
    axis1, axis2 = _axes(step, ranges, resolution)
    kind, states = step_targets(step, step2_kind)
    targets = require_curves(dataset, kind, states)
    grid = targets[0].instants
    n_traj = model.run.n_trajectories if n_traj is None else n_traj
    inner = replace(model, workers=1)

    def point(index):
        i, j = np.unravel_index(index, (len(axis1.values), len(axis2.values)))
        noise = step_noise(step, base, axis1.values[i], axis2.values[j])
        sims = inner.simulate(states, kind, noise, n_traj=n_traj, grid=grid)
        value = float(np.mean([cost(sim, exp) for sim, exp in zip(sims, targets)]))
        log.debug("step %s %s=%.4g %s=%.4g cost %.4e", step, axis1.name, axis1.values[i], axis2.name,
                  axis2.values[j], value)
        return value

    log.info("step %s sweep: %dx%d grid over %s, %s", step, len(axis1.values), len(axis2.values), axis1.name,
             axis2.name)
    with ThreadPoolExecutor(max_workers=workers or model.worker_count()) as pool:
        values = list(pool.map(point, range(len(axis1.values) * len(axis2.values))))
    return CostSurface(step=step, axis1=axis1, axis2=axis2, cost=np.reshape(values, (len(axis1.values), -1)))


def locate_minimum(surface, maxiter=500):
    i, j = surface.best_cell()
    best = Minimum(float(surface.axis1.values[i]), float(surface.axis2.values[j]), float(surface.cost[i, j]))
    x, y = surface.axis1.coords(), surface.axis2.coords()
    kx, ky = min(3, len(x) - 1), min(3, len(y) - 1)
    spline = RectBivariateSpline(x, y, surface.cost, kx=kx, ky=ky)
    bounds = [(x[0], x[-1]), (y[0], y[-1])]

    result = optimize.minimize(lambda p: float(spline(p[0], p[1])[0, 0]), x0=[x[i], y[j]], method="Nelder-Mead",
                               bounds=bounds, options={"maxiter": maxiter, "xatol": 1e-9, "fatol": 1e-13})
    if not result.success:
        log.warning("Nelder-Mead stopped after %d iterations on step %s surface; keeping the best grid cell",
                    result.nit, surface.step)
        return replace(best, converged=False)
    value = max(0.0, float(result.fun))
    if value >= best.cost:
        return best
    p1 = float(surface.axis1.from_coords(np.clip(result.x[0], *bounds[0])))
    p2 = float(surface.axis2.from_coords(np.clip(result.x[1], *bounds[1])))
    return Minimum(p1, p2, value)


def run_three_step_fit(dataset, model, base, ranges=None, resolution=None, n_traj=None, workers=None,
                       step2_kind="dd", include_fluctuators=True, label="full"):
    """Steps I, II and III in order, each fixing its pair before the next sweep."""
    needed = [step_targets("I"), step_targets("II", step2_kind)]
    if include_fluctuators:
        needed.append(step_targets("III"))
    missing = []
    for kind, states in needed:
        try:
            require_curves(dataset, kind, states)
        except FitError as exc:
            missing += exc.missing
    if missing:
        raise FitError("three-step fit needs free |1>, free |+> and the six Pauli curves", missing)

    surfaces, minima = [], []
    current = base
    steps = ("I", "II", "III") if include_fluctuators else ("I", "II")
    for step in steps:
        surface = sweep_grid(step, dataset, model, current, ranges, resolution, n_traj, workers, step2_kind)
        minimum = locate_minimum(surface)
        current = fix_params(step, current, minimum.p1, minimum.p2)
        log.info("step %s: %s=%.4g, %s=%.4g (cost %.3e)", step, surface.axis1.name, minimum.p1,
                 surface.axis2.name, minimum.p2, minimum.cost)
        surfaces.append(surface)
        minima.append(minimum)

    fl = current.fluctuators if include_fluctuators else None
    spec = current.x
    return FitResult(
        g_x=current.x.g,
        omega_c_x=current.x.omega_c,
        g_z=current.z.g,
        omega_c_z=current.z.omega_c,
        b=fl.b if fl else 0.0,
        gamma_max=fl.gamma_max if fl else 0.0,
        fixed={"temperature_ghz": spec.temperature, "eta": spec.eta,
               "gamma_min": fl.gamma_min if fl else (base.fluctuators.gamma_min if base.fluctuators else 0.0)},
        surfaces=tuple(surfaces),
        minima=tuple(minima),
        label=label,
    )


def _decay(t, amplitude, t1):
    return amplitude * np.exp(-t / t1)


def extract_t1(curve):
    """Least-squares A*exp(-t/T1); returns (T1 in microseconds, rms residual)."""
    t, p = curve.instants, curve.mean
    if len(t) < 3 or p[-1] >= p[0]:
        raise FitError("curve does not decay; no T1 to extract")
    guess = (t[-1] - t[0]) / np.log(p[0] / p[-1]) if p[-1] > 0 else t[-1]
    try:
        (amplitude, t1), _ = optimize.curve_fit(_decay, t, p, p0=[p[0], guess], maxfev=10000)
    except RuntimeError as exc:
        raise FitError(f"T1 fit failed: {exc}") from exc
    if not np.isfinite(t1) or t1 <= 0:
        raise FitError("curve does not decay; no T1 to extract")
    residual = float(np.sqrt(np.mean((_decay(t, amplitude, t1) - p) ** 2)))
    return float(t1) / 1e3, residual


def synthesize_dataset(model, noise, states, kinds, shots=8192, seed=0, n_traj=None):
    """Binomially sampled counts drawn from simulated curves; the labelled synthetic fixtures."""
    rng = np.random.default_rng(seed)
    records = []
    for kind in kinds:
        curves = model.simulate(states, kind, noise, n_traj=n_traj)
        for u3, curve in zip(states, curves):
            counts0 = rng.binomial(shots, np.clip(curve.mean, 0.0, 1.0))
            records.append(ExperimentRecord(state=u3, kind=kind, instants=curve.instants, shots=shots,
                                            counts0=counts0, total_ns=model.run.total_ns))
    log.info("synthesized %d records (%d shots each)", len(records), shots)
    return records
