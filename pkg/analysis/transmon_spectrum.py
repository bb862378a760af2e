import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import linalg

from analysis.errors import SpecError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransmonSpec:
    E_C: float
    E_J: float
    n_g: float = 0.0
    n_max: int = 50
    n_levels: int = 4

    def check_basis(self):
        # Minimal requirements for writing down the charge-basis matrix
        if self.E_C <= 0:
            raise SpecError(f"E_C must be positive, got {self.E_C}")
        if self.E_J < 0:
            raise SpecError(f"E_J must be non-negative, got {self.E_J}")
        if self.n_max < 1:
            raise SpecError(f"n_max must be at least 1, got {self.n_max}")

    def validate(self):
        self.check_basis()
        if self.E_J / self.E_C <= 20:
            raise SpecError(f"E_J/E_C = {self.E_J / self.E_C:.2f} is outside the transmon regime (> 20)")
        if self.n_max < 20:
            raise SpecError(f"n_max must be at least 20, got {self.n_max}")
        if not 2 <= self.n_levels <= 2 * self.n_max + 1:
            raise SpecError(f"n_levels must lie in [2, {2 * self.n_max + 1}], got {self.n_levels}")


@dataclass(frozen=True)
class DeviceSpec:
    """Calibration data of one physical qubit, plus the per-device coupling-operator scales."""

    name: str
    qubit_freq_ghz: float
    anharmonicity_ghz: float
    t1_us: float = float("nan")
    t2_us: float = float("nan")
    sx_len_ns: float = 35.556
    readout_error: float = 0.0
    sx_gate_error: float = 0.0
    charge_coupling_scale: float = 1.0
    josephson_coupling_scale: float = 1.0

    def __post_init__(self):
        if self.qubit_freq_ghz <= 0 or self.anharmonicity_ghz <= 0:
            raise SpecError(f"device {self.name}: qubit frequency and anharmonicity must be positive")
        if self.charge_coupling_scale < 0 or self.josephson_coupling_scale < 0:
            raise SpecError(f"device {self.name}: coupling scales must be non-negative")


@dataclass(frozen=True, eq=False)
class TransmonSpectrum:
    spec: TransmonSpec
    omega: np.ndarray
    charge_op: np.ndarray
    cosphi_op: np.ndarray
    # Solved with at least three levels, so it survives truncation to a qubit
    anharmonicity: float
    charge_scale: float = 1.0
    josephson_scale: float = 1.0

    @property
    def n_levels(self):
        return len(self.omega)

    @property
    def qubit_freq(self):
        return float(self.omega[1] - self.omega[0])

    @property
    def couplings(self):
        return np.real(np.diag(self.charge_op, k=1)).copy()

    @property
    def drive_ladder(self):
        """g_{k,k+1}/g_{01}: drive matrix elements with the qubit coupling absorbed into the envelope."""
        g = self.couplings
        return g / g[0]

    def g_tilde(self):
        g = self.couplings
        return g / np.sqrt(np.arange(1, len(g) + 1))


def build_charge_hamiltonian(spec):
    spec.check_basis()
    n = np.arange(-spec.n_max, spec.n_max + 1, dtype=float)
    off = np.full(len(n) - 1, -spec.E_J / 2.0)
    return np.diag(4.0 * spec.E_C * (n - spec.n_g) ** 2) + np.diag(off, 1) + np.diag(off, -1)


def _charge_operators(n_max):
    n = np.arange(-n_max, n_max + 1, dtype=float)
    ones = np.full(len(n) - 1, 0.5)
    return np.diag(n), np.diag(ones, 1) + np.diag(ones, -1)


def _diagonalize(spec, n_keep):
    ham = build_charge_hamiltonian(spec)
    try:
        evals, evecs = linalg.eigh(ham, subset_by_index=[0, n_keep - 1])
    except linalg.LinAlgError as exc:
        raise SpecError(f"diagonalization failed for {spec}: {exc}") from exc
    return evals, evecs


def solve_spectrum(spec):
    spec.validate()
    evals, evecs = _diagonalize(spec, max(spec.n_levels, 3))
    n_op, cos_op = _charge_operators(spec.n_max)

    # Sign convention: every g_{k,k+1} real and positive
    for k in range(1, evecs.shape[1]):
        if evecs[:, k - 1] @ n_op @ evecs[:, k] < 0:
            evecs[:, k] *= -1.0
    charge = evecs.T @ n_op @ evecs
    cosphi = evecs.T @ cos_op @ evecs
    omega = evals - evals[0]

    spectrum = TransmonSpectrum(
        spec=spec,
        omega=omega[: spec.n_levels].copy(),
        charge_op=charge[: spec.n_levels, : spec.n_levels].astype(complex),
        cosphi_op=cosphi[: spec.n_levels, : spec.n_levels].astype(complex),
        anharmonicity=float((omega[1] - omega[0]) - (omega[2] - omega[1])),
    )
    log.debug("solved transmon E_C=%.6f E_J=%.6f: omega_q=%.6f GHz", spec.E_C, spec.E_J, spectrum.qubit_freq)
    return spectrum


def truncate(spectrum, n_levels):
    if not 2 <= n_levels <= spectrum.n_levels:
        raise SpecError(f"cannot truncate a {spectrum.n_levels}-level spectrum to {n_levels} levels")
    return replace(
        spectrum,
        spec=replace(spectrum.spec, n_levels=n_levels),
        omega=spectrum.omega[:n_levels].copy(),
        charge_op=spectrum.charge_op[:n_levels, :n_levels].copy(),
        cosphi_op=spectrum.cosphi_op[:n_levels, :n_levels].copy(),
    )


def coupling_operators(spectrum):
    """Return (A_x, A_z) whose qubit-subspace projections are s_x*sigma_x and s_z*sigma_z."""
    n01 = spectrum.charge_op[0, 1].real
    a_x = spectrum.charge_scale * spectrum.charge_op / n01

    c00, c11 = spectrum.cosphi_op[0, 0].real, spectrum.cosphi_op[1, 1].real
    half_gap = (c00 - c11) / 2.0
    if abs(half_gap) < 1e-14:
        raise SpecError("cos(phi) has no diagonal variation on the qubit subspace")
    identity = np.eye(spectrum.n_levels)
    a_z = spectrum.josephson_scale * (spectrum.cosphi_op - (c00 + c11) / 2.0 * identity) / half_gap
    return a_x, a_z


def _qubit_levels(e_c, e_j, n_max):
    evals, _ = _diagonalize(TransmonSpec(E_C=e_c, E_J=e_j, n_max=n_max, n_levels=3), 3)
    w01 = evals[1] - evals[0]
    return np.array([w01, w01 - (evals[2] - evals[1])])


def fit_circuit_params(omega_q, eta_q, n_max=50, rtol=1e-9, max_iter=60):
    if omega_q <= 0 or eta_q <= 0:
        raise SpecError("qubit frequency and anharmonicity must be positive")
    if omega_q / eta_q <= 5:
        raise SpecError(f"omega_q/eta_q = {omega_q / eta_q:.2f} is too small for a transmon")

    target = np.array([omega_q, eta_q])
    x = np.array([eta_q, (omega_q + eta_q) ** 2 / (8.0 * eta_q)])

    def residual(p):
        return (_qubit_levels(p[0], p[1], n_max) - target) / target

    r = residual(x)
    for iteration in range(max_iter):
        if np.max(np.abs(r)) < rtol:
            break
        # Forward-difference Jacobian
        jac = np.empty((2, 2))
        for j in range(2):
            step = np.zeros(2)
            step[j] = 1e-7 * x[j]
            jac[:, j] = (residual(x + step) - r) / step[j]
        delta = np.linalg.solve(jac, -r)

        # Damping: halve until the residual shrinks
        scale = 1.0
        while scale > 1e-6:
            trial = x + scale * delta
            if np.all(trial > 0):
                r_trial = residual(trial)
                if np.linalg.norm(r_trial) < np.linalg.norm(r):
                    break
            scale /= 2.0
        else:
            raise SpecError(f"Newton iteration stalled at E_C={x[0]:.6f}, E_J={x[1]:.6f}")
        x, r = trial, r_trial
    else:
        raise SpecError(f"no transmon solution for omega_q={omega_q}, eta_q={eta_q}")

    e_c, e_j = float(x[0]), float(x[1])
    if e_j / e_c <= 20:
        raise SpecError(f"solution E_J/E_C = {e_j / e_c:.2f} lies outside the transmon regime")
    log.info("fitted E_C=%.6f GHz, E_J=%.6f GHz after %d iterations", e_c, e_j, iteration)
    return e_c, e_j


@lru_cache(maxsize=16)
def device_spectrum(device, n_levels=4, n_max=50):
    e_c, e_j = fit_circuit_params(device.qubit_freq_ghz, device.anharmonicity_ghz, n_max=n_max)
    spectrum = solve_spectrum(TransmonSpec(E_C=e_c, E_J=e_j, n_max=n_max, n_levels=n_levels))
    return replace(
        spectrum,
        charge_scale=device.charge_coupling_scale,
        josephson_scale=device.josephson_coupling_scale,
    )
