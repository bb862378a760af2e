"""Hybrid Redfield propagation.

The state is carried in the toggling frame rho~ = U(t)^dag rho U(t) of the noiseless
rotating-frame evolution U. Each coupling operator is split into drive-harmonic
components A^(m) (m = row level minus column level), so that

    A_rot(t)  = sum_m exp(i m w_d t) A^(m)
    B^(m)(t)  = U(t)^dag A^(m) U(t)
    K^(m)(t)  = int_0^t C(s) exp(-i m w_d s) B^(m)(t - s) ds
    Lambda~   = sum_m exp(i m w_d t) K^(m)(t)

K is a causal convolution, evaluated for all grid times at once with product
integration weights (B piecewise linear) and an FFT. Per step the dissipator
-[A, Lambda rho - rho Lambda^dag] is integrated with the fast phases exp(i M w_d t)
treated exactly and the slow factors averaged over the step. Fluctuators enter
the coherent part as sum_k b chi_k(t) A_z^(0), one realization per trajectory.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson
from scipy.signal import fftconvolve

from analysis.errors import IntegrationError, SpecError
from analysis.noise_bath import (
    correlation_function_grid,
    draw_rates,
    fluctuator_values,
    memory_grid,
    sample_fluctuators,
)
from analysis.pulse_control import (
    DriveSegment,
    FrameUpdate,
    IdealGate,
    IdleSegment,
    PulseProgram,
    drive_hamiltonians,
    frame_rotation,
    step_propagators,
)
from analysis.transmon_spectrum import coupling_operators
from utils.data_loader import DecayCurve

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
WORKERS_ENV = "TRANSMON_NOISE_WORKERS"


@dataclass(frozen=True)
class PropagationOptions:
    dt: float = 0.1
    micro_dt: float = 0.02
    memory_cutoff: float = None
    frame: str = "rotating"
    store_instants: tuple = ()
    trace_tolerance: float = 1e-5
    negativity_tolerance: float = 1e-4
    adaptive: bool = True
    step_tolerance: float = 1e-5
    check_window: float = 100.0
    min_dt: float = 0.01
    chunk_steps: int = 2048
    trajectory_chunk: int = 50
    workers: int = None

    def __post_init__(self):
        if self.dt <= 0 or self.micro_dt <= 0:
            raise SpecError("dt and micro_dt must be positive")
        if self.frame != "rotating":
            raise SpecError(f"only the rotating frame is supported, got '{self.frame}'")
        if self.memory_cutoff is not None and self.memory_cutoff <= 0:
            raise SpecError("memory_cutoff must be positive")

    def worker_count(self):
        if self.workers is not None:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))


@dataclass(frozen=True, eq=False)
class TrajectoryResult:
    instants: np.ndarray
    rho: np.ndarray
    min_eigenvalue: float
    trace_drift: float
    hermiticity: float


def _steps_for(duration, h, what):
    count = duration / h
    n = int(round(count))
    if abs(count - n) > 1e-6 * max(1.0, count):
        raise SpecError(f"{what} of {duration} ns is not a multiple of the engine step {h} ns")
    return n


@lru_cache(maxsize=128)
def _drive_steps(spectrum, envelope, h, n_micro):
    """Rotating-frame step propagators of one pulse on the engine grid."""
    n_steps = _steps_for(envelope.t_g, h, "pulse")
    delta = h / n_micro
    mids = (np.arange(n_steps * n_micro) + 0.5) * delta
    micro = step_propagators(drive_hamiltonians(mids, spectrum, envelope), delta)
    micro = micro.reshape(n_steps, n_micro, spectrum.n_levels, spectrum.n_levels)
    steps = micro[:, 0]
    for j in range(1, n_micro):
        steps = micro[:, j] @ steps
    return steps


@dataclass(frozen=True, eq=False)
class SystemHistory:
    """Noiseless rotating-frame propagators U(t_n) on the uniform engine grid."""

    spectrum: object
    h: float
    unitaries: np.ndarray

    @property
    def n_steps(self):
        return len(self.unitaries) - 1

    @property
    def times(self):
        return np.arange(len(self.unitaries)) * self.h

    @property
    def omega_d(self):
        return TWO_PI * self.spectrum.qubit_freq

    def index_of(self, t):
        return _steps_for(t, self.h, "instant")

    def conjugated(self, op, start=0, stop=None):
        """U_n^dag op U_n for n in [start, stop)."""
        u = self.unitaries[start:stop]
        return np.einsum("nba,bc,ncd->nad", u.conj(), op, u)


def build_history(spectrum, program, h, micro_dt=0.02):
    d = spectrum.n_levels
    n_total = _steps_for(program.duration, h, "schedule")
    n_micro = max(1, int(round(h / micro_dt)))
    idle_phase = np.exp(-1j * TWO_PI * (spectrum.omega - np.arange(d) * spectrum.qubit_freq) * h)

    unitaries = np.empty((n_total + 1, d, d), dtype=complex)
    unitaries[0] = np.eye(d)
    n = 0
    for seg in program.segments:
        if isinstance(seg, IdleSegment):
            k = _steps_for(seg.duration, h, "idle")
            if k:
                powers = idle_phase[None, :] ** np.arange(1, k + 1)[:, None]
                unitaries[n + 1:n + k + 1] = powers[:, :, None] * unitaries[n][None]
            n += k
        elif isinstance(seg, DriveSegment):
            for step in _drive_steps(spectrum, seg.envelope, h, n_micro):
                unitaries[n + 1] = step @ unitaries[n]
                n += 1
        elif isinstance(seg, FrameUpdate):
            unitaries[n] = frame_rotation(d, seg.angle) @ unitaries[n]
        elif isinstance(seg, IdealGate):
            unitaries[n] = seg.embedded(d) @ unitaries[n]
        else:
            raise SpecError(f"unknown schedule segment {seg!r}")
    return SystemHistory(spectrum=spectrum, h=h, unitaries=unitaries)


def harmonic_components(op, tol=1e-12):
    """Split op into {m: op restricted to entries with row - column == m}."""
    d = len(op)
    rows, cols = np.indices((d, d))
    shift = rows - cols
    scale = np.max(np.abs(op)) or 1.0
    parts = {}
    for m in range(-(d - 1), d):
        part = np.where(shift == m, op, 0.0)
        if np.max(np.abs(part)) > tol * scale:
            parts[m] = part
    return parts


def _sub_points(m, omega_d, h, spacing):
    # Simpson nodes per step: resolve the harmonic phase and the correlation grid
    q = max(8, int(np.ceil(abs(m) * omega_d * h / 0.4)), int(np.ceil(h / spacing)))
    return q + (q % 2)


def kernel_weights(corr, m, omega_d, h, n_lags):
    """Product-integration weights w_l (l = 0..n_lags) and the start-correction alpha_l."""
    q = _sub_points(m, omega_d, h, corr.spacing)
    u = np.linspace(0.0, 1.0, q + 1)
    weights = np.zeros(n_lags + 1, dtype=complex)
    alpha = np.zeros(n_lags, dtype=complex)
    block = max(1, 2**20 // (q + 1))
    for lo in range(0, n_lags, block):
        hi = min(n_lags, lo + block)
        s = (np.arange(lo, hi)[:, None] + u[None, :]) * h
        kernel = corr.at(s) * np.exp(-1j * m * omega_d * s)
        a = h * simpson(kernel * (1.0 - u), x=u, axis=1)
        b = h * simpson(kernel * u, x=u, axis=1)
        alpha[lo:hi] = a
        weights[lo:hi] += a
        weights[lo + 1:hi + 1] += b
    return weights, alpha


@dataclass(frozen=True, eq=False)
class ChannelKernel:
    name: str
    corr: object
    components: dict
    kernels: dict
    n_lags: int


def lag_count(cutoff, h, n_steps):
    return max(1, min(n_steps, int(np.ceil(cutoff / h - 1e-9))))


def _channel_setup(history, spec, op, memory_cutoff):
    span = max(history.n_steps * history.h, history.h)
    corr, tau_mem = memory_grid(spec, span)
    cutoff = memory_cutoff if memory_cutoff is not None else tau_mem
    n_lags = lag_count(cutoff, history.h, history.n_steps)
    if n_lags * history.h > corr.taus[-1]:
        corr = correlation_function_grid(spec, n_lags * history.h + history.h)
    return corr, n_lags, harmonic_components(op)


def lambda_series(history, name, spec, op, memory_cutoff=None):
    """K^(m)(t_n) for every grid time, per harmonic m of the coupling operator."""
    corr, n_lags, parts = _channel_setup(history, spec, op, memory_cutoff)
    n_total = history.n_steps + 1
    kernels = {}
    for m, part in parts.items():
        weights, alpha = kernel_weights(corr, m, history.omega_d, history.h, n_lags)
        series = history.conjugated(part)
        conv = fftconvolve(weights[:, None, None], series, axes=0)[:n_total]
        edge = min(n_lags, n_total)
        conv[:edge] -= alpha[:edge, None, None] * series[0][None]
        kernels[m] = conv
    log.debug("channel %s: %d harmonics, memory %d steps", name, len(parts), n_lags)
    return ChannelKernel(name=name, corr=corr, components=parts, kernels=kernels, n_lags=n_lags)


def lambda_from_series(history, channel, n):
    """Rotating-frame Lambda at grid index n assembled from a lambda_series result."""
    t = n * history.h
    total = sum(np.exp(1j * m * history.omega_d * t) * k[n] for m, k in channel.kernels.items())
    u = history.unitaries[n]
    return u @ total @ u.conj().T


def lambda_operator_at(t, channel, history, corr, memory_cutoff=None):
    """Rotating-frame Lambda_i(t) by direct quadrature over the cached history.

    Reference evaluation of the same product-integration rule the FFT series uses.
    """
    if history is None:
        raise SpecError("lambda_operator_at needs a propagator history")
    n = history.index_of(t)
    if n > history.n_steps:
        raise SpecError(f"t = {t} ns lies beyond the cached history")
    a_x, a_z = coupling_operators(history.spectrum)
    op = a_x if channel == "x" else a_z
    d = history.spectrum.n_levels
    if n == 0:
        return np.zeros((d, d), dtype=complex)
    cutoff = memory_cutoff if memory_cutoff is not None else (corr.memory_time() or corr.taus[-1])
    n_lags = lag_count(cutoff, history.h, history.n_steps)
    if n_lags * history.h > corr.taus[-1]:
        raise SpecError(f"correlation grid ends before the memory cutoff ({cutoff} ns)")
    total = np.zeros((d, d), dtype=complex)
    for m, part in harmonic_components(op).items():
        weights, alpha = kernel_weights(corr, m, history.omega_d, history.h, n_lags)
        lags = np.arange(0, min(n, n_lags) + 1)
        series = history.conjugated(part, n - lags[-1], n + 1)[::-1]
        k = np.tensordot(weights[: len(lags)], series, axes=(0, 0))
        if n < n_lags:
            k -= alpha[n] * history.conjugated(part, 0, 1)[0]
        total += np.exp(1j * m * history.omega_d * t) * k
    u = history.unitaries[n]
    return u @ total @ u.conj().T


def _phase_integrals(big_m, omega_d, t0, t1):
    if big_m == 0:
        return t1 - t0
    w = big_m * omega_d
    return (np.exp(1j * w * t1) - np.exp(1j * w * t0)) / (1j * w)


def _kron(x, y):
    c, d = x.shape[0], x.shape[-1]
    return np.einsum("nai,nbj->nabij", x, y).reshape(c, d * d, d * d)


def dissipator_chunk(history, channels, n0, n1):
    """Step-integrated Liouville generators D_n (row-major vec) for n in [n0, n1)."""
    d = history.spectrum.n_levels
    c = n1 - n0
    eye = np.broadcast_to(np.eye(d, dtype=complex), (c, d, d))
    times = history.times
    t0, t1 = times[n0:n1], times[n0 + 1:n1 + 1]
    total = np.zeros((c, d * d, d * d), dtype=complex)
    for ch in channels:
        b_bar = {m: history.conjugated(part, n0, n1 + 1) for m, part in ch.components.items()}
        b_bar = {m: 0.5 * (b[:-1] + b[1:]) for m, b in b_bar.items()}
        k_bar = {m: 0.5 * (k[n0:n1] + k[n0 + 1:n1 + 1]) for m, k in ch.kernels.items()}
        for m, b in b_bar.items():
            left = sum(_phase_integrals(m + mp, history.omega_d, t0, t1)[:, None, None] * k
                       for mp, k in k_bar.items())
            right = sum(_phase_integrals(m - mp, history.omega_d, t0, t1)[:, None, None]
                        * np.conj(np.swapaxes(k, 1, 2)) for mp, k in k_bar.items())
            total -= _kron(b @ left, eye)
            total += _kron(left, np.swapaxes(b, 1, 2))
            total -= _kron(eye, np.swapaxes(right @ b, 1, 2))
            total += _kron(b, np.swapaxes(right, 1, 2))
    return total


@dataclass(frozen=True, eq=False)
class _Prepared:
    history: SystemHistory
    channels: list
    a_z0: np.ndarray
    instants: np.ndarray
    instant_steps: np.ndarray


def _prepare(spectrum, schedule, noise, opts, h):
    history = build_history(spectrum, schedule, h, min(opts.micro_dt, h))
    a_x, a_z = coupling_operators(spectrum)
    channels = []
    for name, spec in noise.channels.items():
        op = a_x if name == "x" else a_z
        channels.append(lambda_series(history, name, spec, op, opts.memory_cutoff))
    instants = np.asarray(opts.store_instants or (schedule.duration,), dtype=float)
    if np.any(instants < -1e-9) or np.any(instants > schedule.duration * (1 + 1e-12) + 1e-9):
        raise SpecError("store_instants must lie within the schedule span")
    steps = np.array([history.index_of(t) for t in instants], dtype=int)
    a_z0 = harmonic_components(a_z).get(0, np.zeros_like(a_z))
    return _Prepared(history, channels, a_z0, instants, steps)


def _advance(vec, prepared, d_chunk, n0, n1, fluct_chunk):
    """Advance a (batch, d*d) toggling-frame state through steps [n0, n1)."""
    d = prepared.history.spectrum.n_levels
    record = {}
    targets = {int(s) for s in prepared.instant_steps}
    if n0 in targets:
        record[n0] = vec.copy()
    for j, n in enumerate(range(n0, n1)):
        gen = d_chunk[j].T
        w = vec @ gen
        vec = vec + w + 0.5 * (w @ gen)
        if fluct_chunk is not None:
            q, lam, theta = fluct_chunk[0][j], fluct_chunk[1][j], fluct_chunk[2][:, j]
            rho = vec.reshape(-1, d, d)
            rq = q.conj().T @ rho @ q
            phase = np.exp(-1j * theta[:, None] * lam[None, :])
            rq = phase[:, :, None] * rq * phase.conj()[:, None, :]
            vec = (q @ rq @ q.conj().T).reshape(-1, d * d)
        if n + 1 in targets:
            record[n + 1] = vec.copy()
    return vec, record


def _fluct_geometry(prepared, n0, n1):
    bz = prepared.history.conjugated(prepared.a_z0, n0, n1 + 1)
    mid = 0.5 * (bz[:-1] + bz[1:])
    mid = 0.5 * (mid + np.conj(np.swapaxes(mid, 1, 2)))
    lam, q = np.linalg.eigh(mid)
    return q, lam


def propagate_map(spectrum, rho0s, schedule, noise, realizations, opts):
    """rho(t_i) for every (realization, initial state): array (T, S, n_instants, d, d).

    `realizations` is a list of FluctuatorRealization (use [None] for no fluctuators).
    """
    h = resolve_step(spectrum, schedule, noise, opts)
    prepared = _prepare(spectrum, schedule, noise, opts, h)
    return _run(prepared, rho0s, noise, realizations, opts)


def _run(prepared, rho0s, noise, realizations, opts):
    history = prepared.history
    d = history.spectrum.n_levels
    rho0s = np.asarray(rho0s, dtype=complex).reshape(-1, d, d)
    n_states = len(rho0s)
    stochastic = noise.is_stochastic and realizations[0] is not None
    chunk = max(1, opts.trajectory_chunk)
    batches = [realizations[i:i + chunk] for i in range(0, len(realizations), chunk)]
    vecs = [np.tile(rho0s.reshape(n_states, d * d), (len(batch), 1)) for batch in batches]
    records = [{} for _ in batches]
    scale = TWO_PI * history.h

    def step_batch(index, d_chunk, n0, n1, geometry):
        fluct = None
        if stochastic:
            mids = history.times[n0:n1] + 0.5 * history.h
            theta = np.stack([fluctuator_values(real, mids) for real in batches[index]]) * scale
            fluct = (geometry[0], geometry[1], np.repeat(theta, n_states, axis=0))
        vecs[index], rec = _advance(vecs[index], prepared, d_chunk, n0, n1, fluct)
        records[index].update(rec)

    n_total = history.n_steps
    with ThreadPoolExecutor(max_workers=opts.worker_count()) as pool:
        if n_total == 0:
            for index in range(len(batches)):
                records[index][0] = vecs[index].copy()
        for n0 in range(0, n_total, opts.chunk_steps):
            n1 = min(n_total, n0 + opts.chunk_steps)
            if prepared.channels:
                d_chunk = dissipator_chunk(history, prepared.channels, n0, n1)
            else:
                d_chunk = np.zeros((n1 - n0, d * d, d * d), dtype=complex)
            geometry = _fluct_geometry(prepared, n0, n1) if stochastic else None
            list(pool.map(lambda i: step_batch(i, d_chunk, n0, n1, geometry), range(len(batches))))

    out = np.empty((len(realizations), n_states, len(prepared.instants), d, d), dtype=complex)
    for index, batch in enumerate(batches):
        start = index * chunk
        for k, step in enumerate(prepared.instant_steps):
            rho_t = records[index][int(step)].reshape(len(batch), n_states, d, d)
            u = history.unitaries[step]
            out[start:start + len(batch), :, k] = u @ rho_t @ u.conj().T
    _check_states(out, prepared.instants, opts)
    return out


def _check_states(rhos, instants, opts):
    traces = np.real(np.trace(rhos, axis1=-2, axis2=-1))
    drift = np.abs(traces - 1.0)
    if np.any(drift > opts.trace_tolerance):
        where = np.unravel_index(np.argmax(drift), drift.shape)
        raise IntegrationError(f"trace drift {drift[where]:.2e} beyond tolerance", instants[where[-1]],
                               trajectory=int(where[0]))
    herm = 0.5 * (rhos + np.conj(np.swapaxes(rhos, -1, -2)))
    min_eig = float(np.min(np.linalg.eigvalsh(herm)))
    if min_eig < -opts.negativity_tolerance:
        log.warning("Redfield state dipped to eigenvalue %.2e (tolerated bound %.0e)",
                    min_eig, -opts.negativity_tolerance)
    return min_eig


def propagate_trajectory(spectrum, rho0, schedule, noise, fluct, opts):
    rhos = propagate_map(spectrum, [rho0], schedule, noise, [fluct], opts)[0, 0]
    traces = np.real(np.trace(rhos, axis1=-2, axis2=-1))
    herm = np.max(np.abs(rhos - np.conj(np.swapaxes(rhos, -1, -2))))
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (rhos + np.conj(np.swapaxes(rhos, -1, -2))))))
    instants = np.asarray(opts.store_instants or (schedule.duration,), dtype=float)
    return TrajectoryResult(instants=instants, rho=rhos, min_eigenvalue=min_eig,
                            trace_drift=float(np.max(np.abs(traces - 1.0))), hermiticity=float(herm))


def _check_program(schedule, window):
    if window is None or window >= schedule.duration:
        return schedule
    kept, elapsed = [], 0.0
    for seg in schedule.segments:
        kept.append(seg)
        elapsed += seg.duration
        if elapsed >= window:
            break
    return PulseProgram(tuple(kept))


def resolve_step(spectrum, schedule, noise, opts):
    """Engine step after step-doubling validation.

    The check covers the opening `check_window` ns of the schedule, or all of it when
    the window is None.
    """
    h = opts.dt
    if not opts.adaptive or schedule.duration == 0:
        return h
    segment = _check_program(schedule, opts.check_window)
    d = spectrum.n_levels
    samples = [np.outer(v, v.conj()) for v in _check_vectors(d)]
    quiet = noise.without_fluctuators()
    check_opts = replace(opts, store_instants=(segment.duration,), adaptive=False)
    while True:
        coarse = _run(_prepare(spectrum, segment, quiet, check_opts, h), samples, quiet, [None], check_opts)
        fine = _run(_prepare(spectrum, segment, quiet, check_opts, h / 2.0), samples, quiet, [None], check_opts)
        error = float(np.max(np.abs(coarse - fine)))
        if error <= opts.step_tolerance:
            if h != opts.dt:
                log.info("engine step reduced to %.4f ns (step-doubling error %.1e)", h, error)
            return h
        h /= 2.0
        if h < opts.min_dt:
            raise IntegrationError(f"step-size underflow: {h:.2e} ns below {opts.min_dt} ns", segment.duration)


def _check_vectors(d):
    s = 1.0 / np.sqrt(2.0)
    vectors = []
    for amp in ([1, 0], [0, 1], [s, s], [s, 1j * s]):
        v = np.zeros(d, dtype=complex)
        v[:2] = amp
        vectors.append(v)
    return vectors


def state_fidelity(rho, psi):
    """<psi| P rho P |psi> with P the projector on the qubit subspace."""
    psi = np.asarray(psi, dtype=complex)
    block = np.asarray(rho)[..., :2, :2]
    return np.real(np.einsum("a,...ab,b->...", psi.conj(), block, psi))


def trajectory_seed(base_seed, index):
    return (int(base_seed), int(index))


def draw_realizations(noise, t_max, n_traj, base_seed):
    if not noise.is_stochastic:
        return [None]
    spec = noise.fluctuators
    shared = None
    if not noise.resample_rates:
        shared = draw_rates(spec, np.random.default_rng(int(base_seed)))
    return [sample_fluctuators(spec, max(t_max, 1e-9), trajectory_seed(base_seed, k), rates=shared)
            for k in range(n_traj)]


def run_ensemble_states(spectrum, states, schedule, noise, n_traj, base_seed, opts, label="", targets=None,
                        offset=0.0):
    """One DecayCurve per pure qubit state, sharing trajectories and the bath kernels.

    Fidelities are taken against `targets` (default: the initial states); reported
    instants are shifted back by `offset`, the length of any preparation prefix.
    """
    if n_traj < 1:
        raise SpecError(f"n_traj must be at least 1, got {n_traj}")
    d = spectrum.n_levels
    vectors = []
    for psi in states:
        v = np.zeros(d, dtype=complex)
        v[:2] = psi
        vectors.append(v)
    rho0s = [np.outer(v, v.conj()) for v in vectors]
    realizations = draw_realizations(noise, schedule.duration, n_traj, base_seed)
    try:
        rhos = propagate_map(spectrum, rho0s, schedule, noise, realizations, opts)
    except IntegrationError as exc:
        k = exc.trajectory or 0
        raise IntegrationError(f"trajectory with seed {trajectory_seed(base_seed, k)} failed: {exc}",
                               trajectory=k) from exc

    instants = np.asarray(opts.store_instants or (schedule.duration,), dtype=float)
    curves = []
    targets = states if targets is None else targets
    for s, psi in enumerate(targets):
        fids = state_fidelity(rhos[:, s], psi)
        mean = fids.mean(axis=0)
        stderr = fids.std(axis=0, ddof=1) / np.sqrt(len(fids)) if len(fids) > 1 else np.zeros_like(mean)
        curves.append(DecayCurve(instants=instants - offset, mean=mean, half_width=2.0 * stderr, label=label))
    log.debug("ensemble of %d trajectories x %d states done", len(realizations), len(states))
    return curves


def run_ensemble(spectrum, psi, schedule, noise, n_traj, base_seed, opts, label=""):
    return run_ensemble_states(spectrum, [psi], schedule, noise, n_traj, base_seed, opts, label)[0]
