import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import linalg, optimize
from scipy.special import erf

from analysis.errors import IntegrationError, SpecError

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


@dataclass(frozen=True)
class Envelope:
    """Baseline-subtracted Gaussian on [0, t_g].

    `amplitude` is an angular rate (rad/ns) with the 0-1 coupling absorbed, so that
    the envelope integrates to the rotation angle. DRAG adds the quadrature
    drag_alpha * d(eps)/dt / (2*pi*eta_q).
    """

    t_g: float
    sigma: float
    amplitude: float
    shape: str = "gaussian"
    drag_alpha: float = 0.0
    eta_q: float = 0.0
    phase: float = 0.0
    detuning: float = 0.0

    def __post_init__(self):
        if self.shape != "gaussian":
            raise SpecError(f"unsupported envelope shape '{self.shape}'")
        if self.t_g <= 0 or self.sigma <= 0:
            raise SpecError(f"t_g and sigma must be positive, got t_g={self.t_g}, sigma={self.sigma}")
        if self.drag_alpha != 0.0 and self.eta_q <= 0:
            raise SpecError("a DRAG envelope needs a positive anharmonicity")

    @property
    def baseline(self):
        return np.exp(-((self.t_g / 2.0) ** 2) / (2.0 * self.sigma**2))

    def unit_area(self):
        half = self.t_g / 2.0
        return self.sigma * np.sqrt(TWO_PI) * erf(half / (np.sqrt(2.0) * self.sigma)) - self.t_g * self.baseline

    def in_phase(self, t):
        t = np.asarray(t, dtype=float)
        gauss = np.exp(-((t - self.t_g / 2.0) ** 2) / (2.0 * self.sigma**2)) - self.baseline
        return np.where((t >= 0) & (t <= self.t_g), self.amplitude * gauss, 0.0)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        x = t - self.t_g / 2.0
        slope = -x / self.sigma**2 * np.exp(-(x**2) / (2.0 * self.sigma**2))
        return np.where((t >= 0) & (t <= self.t_g), self.amplitude * slope, 0.0)

    def quadrature(self, t):
        if self.drag_alpha == 0.0:
            return np.zeros_like(np.asarray(t, dtype=float))
        return self.drag_alpha * self.derivative(t) / (TWO_PI * self.eta_q)

    def complex_at(self, t):
        return self.in_phase(t) + 1j * self.quadrature(t)


@dataclass(frozen=True)
class GateSpec:
    axis: str
    angle: float = np.pi
    composition: str = "two-halves"
    virtual_z: tuple = field(default=())

    def __post_init__(self):
        if self.axis not in ("X", "Y", "I"):
            raise SpecError(f"gate axis must be X, Y or I, got '{self.axis}'")
        if self.composition not in ("single", "two-halves"):
            raise SpecError(f"unknown gate composition '{self.composition}'")

    def frame_angles(self):
        # (between halves, after the gate); missing entries are zero
        angles = tuple(self.virtual_z) + (0.0, 0.0)
        if self.composition == "single":
            return 0.0, angles[0]
        return angles[0], angles[1]


def make_envelope(angle, t_g, sigma, coupling=1.0):
    if angle < 0:
        raise SpecError(f"rotation angle must be non-negative, got {angle}")
    if coupling <= 0:
        raise SpecError(f"coupling must be positive, got {coupling}")
    unit = Envelope(t_g=t_g, sigma=sigma, amplitude=1.0)
    return replace(unit, amplitude=angle / (coupling * unit.unit_area()))


def apply_drag(env, alpha, eta_q):
    if eta_q <= 0:
        raise SpecError(f"anharmonicity must be positive, got {eta_q}")
    return replace(env, drag_alpha=alpha, eta_q=eta_q)


def frame_rotation(n_levels, angle):
    """Virtual-Z frame update diag(exp(i*k*angle)); on the qubit block it equals rz(angle) up to phase."""
    return np.diag(np.exp(1j * angle * np.arange(n_levels)))


def _static_part(spectrum, env):
    omega_d = spectrum.qubit_freq + env.detuning
    levels = np.arange(spectrum.n_levels)
    return TWO_PI * (spectrum.omega - levels * omega_d)


def drive_hamiltonians(times, spectrum, env):
    """Rotating-frame drive Hamiltonians (rad/ns) stacked along the first axis."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    d = spectrum.n_levels
    ham = np.zeros((len(times), d, d), dtype=complex)
    diag = _static_part(spectrum, env)
    ham[:, np.arange(d), np.arange(d)] = diag

    drive = 0.5 * env.complex_at(times) * np.exp(1j * env.phase)
    ladder = spectrum.drive_ladder
    for k in range(d - 1):
        ham[:, k + 1, k] = ladder[k] * drive
        ham[:, k, k + 1] = ladder[k] * np.conj(drive)
    return ham


def drive_hamiltonian_at(t, spectrum, env):
    return drive_hamiltonians([t], spectrum, env)[0]


def idle_propagator(spectrum, duration, detuning=0.0):
    omega_d = spectrum.qubit_freq + detuning
    phases = TWO_PI * (spectrum.omega - np.arange(spectrum.n_levels) * omega_d)
    return np.diag(np.exp(-1j * phases * duration))


def step_propagators(hams, dt):
    """exp(-i H dt) for a stack of Hermitian matrices."""
    w, v = np.linalg.eigh(hams)
    return np.einsum("nab,nb,ncb->nac", v, np.exp(-1j * w * dt), v.conj())


@lru_cache(maxsize=256)
def pulse_propagator(spectrum, env, dt=0.02):
    n_steps = max(1, int(np.ceil(env.t_g / dt - 1e-9)))
    h = env.t_g / n_steps
    mids = (np.arange(n_steps) + 0.5) * h
    steps = step_propagators(drive_hamiltonians(mids, spectrum, env), h)
    u = np.eye(spectrum.n_levels, dtype=complex)
    for step in steps:
        u = step @ u
    return u


def check_unitary(u, tol=1e-10, time_ns=None):
    err = np.max(np.abs(u.conj().T @ u - np.eye(len(u))))
    if err > tol:
        raise IntegrationError(f"propagator lost unitarity ({err:.2e})", time_ns)
    return err


def ideal_gate(axis, angle):
    if axis == "I":
        return np.eye(2, dtype=complex)
    sigma = SIGMA_X if axis == "X" else SIGMA_Y
    return linalg.expm(-0.5j * angle * sigma)


def axis_envelope(gate, env):
    if gate.axis == "Y":
        return replace(env, phase=env.phase + np.pi / 2.0)
    return env


def half_envelope(env, angle):
    """Recalibrated angle/2 pulse occupying half of env.t_g at the same sigma/t_g ratio."""
    half = make_envelope(angle / 2.0, env.t_g / 2.0, env.sigma / 2.0)
    return replace(env, t_g=half.t_g, sigma=half.sigma, amplitude=half.amplitude)


def simulate_gate(gate, spectrum, env, dt=0.02):
    if dt > 0.1:
        raise SpecError(f"gate micro-step must not exceed 0.1 ns, got {dt}")
    d = spectrum.n_levels
    if gate.axis == "I":
        return idle_propagator(spectrum, env.t_g, env.detuning)

    env = axis_envelope(gate, env)
    mid, after = gate.frame_angles()
    if gate.composition == "single":
        u = pulse_propagator(spectrum, env, dt)
    else:
        u_half = pulse_propagator(spectrum, half_envelope(env, gate.angle), dt)
        u = u_half @ frame_rotation(d, mid) @ u_half
    u = frame_rotation(d, after) @ u
    check_unitary(u, time_ns=env.t_g)
    return u


def polar_states():
    s = 1.0 / np.sqrt(2.0)
    return [
        np.array([1, 0], dtype=complex),
        np.array([0, 1], dtype=complex),
        np.array([s, s], dtype=complex),
        np.array([s, -s], dtype=complex),
        np.array([s, 1j * s], dtype=complex),
        np.array([s, -1j * s], dtype=complex),
    ]


def embed(psi, n_levels):
    out = np.zeros(n_levels, dtype=complex)
    out[: len(psi)] = psi
    return out


def _six_state_average(u, ideal):
    d = len(u)
    fids, pops = [], []
    for psi in polar_states():
        out = u @ embed(psi, d)
        qubit = out[:2]
        target = ideal @ psi
        fids.append(abs(np.vdot(target, qubit)) ** 2)
        pops.append(np.vdot(qubit, qubit).real)
    return float(np.mean(fids)), float(np.mean(pops))


def gate_metrics(propagator, ideal):
    fidelity, population = _six_state_average(propagator, ideal)
    nearest, _ = linalg.polar(propagator[:2, :2])
    phase_fidelity, _ = _six_state_average(nearest, ideal)
    return {
        "fidelity": fidelity,
        "infidelity": 1.0 - fidelity,
        "leakage": max(0.0, 1.0 - population),
        "phase_error": max(0.0, 1.0 - phase_fidelity),
    }


@lru_cache(maxsize=64)
def calibrate_virtual_z(spectrum, env, dt=0.02, angle=np.pi, composition="two-halves"):
    """Virtual-Z angles, in GateSpec.virtual_z order, that best cancel the subspace phase of the gate.

    Two halves get (mid, after); a single pulse gets (after,).
    """
    d = spectrum.n_levels
    ideal = ideal_gate("X", angle)
    if composition == "single":
        u_full = pulse_propagator(spectrum, env, dt)

        def infidelity(angles):
            return 1.0 - _six_state_average(frame_rotation(d, angles[0]) @ u_full, ideal)[0]

        x0 = [0.0]
    else:
        u_half = pulse_propagator(spectrum, half_envelope(env, angle), dt)

        def infidelity(angles):
            u = frame_rotation(d, angles[1]) @ u_half @ frame_rotation(d, angles[0]) @ u_half
            return 1.0 - _six_state_average(u, ideal)[0]

        x0 = [0.0, 0.0]
    result = optimize.minimize(infidelity, x0=x0, method="Nelder-Mead",
                               options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
    log.debug("virtual-Z calibration: %s -> infidelity %.3e", result.x, result.fun)
    return tuple(float(a) for a in result.x)


def compare_compositions(spectrum, env, dt=0.02, axis="X"):
    rows = {}
    for composition in ("single", "two-halves"):
        gate = GateSpec(axis=axis, angle=np.pi, composition=composition)
        rows[composition] = gate_metrics(simulate_gate(gate, spectrum, env, dt), ideal_gate(axis, np.pi))
    return rows


def envelope_spectrum(env, sample_rate=10.0, n_fft=2**16):
    if sample_rate <= 0:
        raise SpecError(f"sample rate must be positive, got {sample_rate}")
    n_samples = int(round(env.t_g * sample_rate)) + 1
    samples = env.complex_at(np.arange(n_samples) / sample_rate)
    size = max(n_fft, n_samples)
    magnitude = np.abs(np.fft.fftshift(np.fft.fft(samples, n=size)))
    freqs = np.fft.fftshift(np.fft.fftfreq(size, d=1.0 / sample_rate))
    return freqs, magnitude / magnitude.max()


def spectral_half_width(freqs, magnitude):
    # Half width at half maximum, interpolated on the positive side
    peak = int(np.argmax(magnitude))
    above = magnitude[peak:] >= 0.5
    edge = peak + int(np.argmin(above))
    f0, f1 = freqs[edge - 1], freqs[edge]
    m0, m1 = magnitude[edge - 1], magnitude[edge]
    return float(f0 + (0.5 - m0) * (f1 - f0) / (m1 - m0) - freqs[peak])


def leakage_overlap(env, eta_q, sample_rate=10.0):
    freqs, magnitude = envelope_spectrum(env, sample_rate)
    return float(np.interp(-eta_q, freqs, magnitude))


def gate_report(spectrum, t_g=70.0, sigma_ratio=1.0 / 6.0, alphas=(0.0, 0.5, 1.0), dt=0.02,
                composition="two-halves", frames=("bare",)):
    """Gate metrics per DRAG setting and axis.

    `frames` selects bare pulses, pulses with calibrated virtual-Z updates, or both.
    """
    unknown = set(frames) - {"bare", "calibrated"}
    if unknown:
        raise SpecError(f"unknown frame setting(s) {sorted(unknown)}")
    rows = []
    for alpha in alphas:
        env = make_envelope(np.pi, t_g, sigma_ratio * t_g)
        if alpha:
            env = apply_drag(env, alpha, spectrum.anharmonicity)
        for mode in frames:
            angles = calibrate_virtual_z(spectrum, env, dt, np.pi, composition) if mode == "calibrated" else ()
            for axis in ("X", "Y"):
                gate = GateSpec(axis=axis, angle=np.pi, composition=composition, virtual_z=angles)
                metrics = gate_metrics(simulate_gate(gate, spectrum, env, dt), ideal_gate(axis, np.pi))
                rows.append({"axis": axis, "drag_alpha": alpha, "composition": composition, "frames": mode,
                             "t_g_ns": t_g, **metrics})
    report = pd.DataFrame(rows)
    log.info("gate report over %d DRAG settings, worst infidelity %.3e", len(alphas), report["infidelity"].max())
    return report


@dataclass(frozen=True)
class DriveSegment:
    envelope: Envelope
    label: str = ""

    @property
    def duration(self):
        return self.envelope.t_g


@dataclass(frozen=True)
class IdleSegment:
    duration: float


@dataclass(frozen=True)
class FrameUpdate:
    """Zero-duration virtual-Z: diag(exp(i*k*angle)) applied to the drive frame."""

    angle: float
    duration: float = 0.0


@dataclass(frozen=True, eq=False)
class IdealGate:
    """Zero-duration ideal qubit unitary (higher levels untouched)."""

    unitary: np.ndarray
    label: str = ""
    duration: float = 0.0

    def embedded(self, n_levels):
        out = np.eye(n_levels, dtype=complex)
        out[:2, :2] = self.unitary
        return out


@dataclass(frozen=True)
class PulseProgram:
    segments: tuple = ()

    @property
    def duration(self):
        return float(sum(seg.duration for seg in self.segments))

    def __add__(self, other):
        return PulseProgram(self.segments + other.segments)

    def repeat(self, times):
        return PulseProgram(self.segments * times)

    def merged(self):
        """Adjacent idles fused and zero-length idles dropped."""
        out = []
        for seg in self.segments:
            if isinstance(seg, IdleSegment):
                if seg.duration <= 0:
                    continue
                if out and isinstance(out[-1], IdleSegment):
                    out[-1] = IdleSegment(out[-1].duration + seg.duration)
                    continue
            out.append(seg)
        return PulseProgram(tuple(out))

    def drive_amplitude_max(self):
        peaks = [seg.envelope.amplitude for seg in self.segments if isinstance(seg, DriveSegment)]
        return max(peaks, default=0.0)


def gate_program(gate, env):
    """Timed segments of one gate with the composition used by simulate_gate."""
    if gate.axis == "I":
        return PulseProgram((IdleSegment(env.t_g),))
    env = axis_envelope(gate, env)
    mid, after = gate.frame_angles()
    if gate.composition == "single":
        segments = (DriveSegment(env, gate.axis),)
    else:
        half = half_envelope(env, gate.angle)
        segments = (DriveSegment(half, gate.axis), FrameUpdate(mid), DriveSegment(half, gate.axis))
    return PulseProgram(segments + (FrameUpdate(after),))


def program_propagator(program, spectrum, dt=0.02):
    """Closed-system propagator of a whole program (used for noise-free checks)."""
    d = spectrum.n_levels
    u = np.eye(d, dtype=complex)
    for seg in program.segments:
        if isinstance(seg, DriveSegment):
            u = pulse_propagator(spectrum, seg.envelope, dt) @ u
        elif isinstance(seg, IdleSegment):
            u = idle_propagator(spectrum, seg.duration) @ u
        elif isinstance(seg, FrameUpdate):
            u = frame_rotation(d, seg.angle) @ u
        elif isinstance(seg, IdealGate):
            u = seg.embedded(d) @ u
    return u


@dataclass(frozen=True)
class U3Params:
    """U3(theta, phi, lambda) in radians, standard convention."""

    theta: float
    phi: float = 0.0
    lam: float = 0.0

    @classmethod
    def from_degrees(cls, theta, phi=0.0, lam=0.0):
        return cls(np.radians(theta), np.radians(phi), np.radians(lam))

    def degrees(self):
        return tuple(float(np.degrees(v)) for v in (self.theta, self.phi, self.lam))

    def key(self):
        # Stable identity for dataset lookups
        return tuple(round(v, 6) for v in self.degrees())

    def matrix(self):
        c, s = np.cos(self.theta / 2.0), np.sin(self.theta / 2.0)
        return np.array([
            [c, -np.exp(1j * self.lam) * s],
            [np.exp(1j * self.phi) * s, np.exp(1j * (self.phi + self.lam)) * c],
        ], dtype=complex)

    def state(self):
        return self.matrix()[:, 0].copy()
