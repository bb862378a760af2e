import logging
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate, signal
from scipy.interpolate import CubicSpline

from analysis.errors import SpecError

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
# k_B / h in GHz per kelvin
KB_OVER_H_GHZ_PER_K = 20.8366


def mk_to_ghz(temperature_mk):
    return temperature_mk * 1e-3 * KB_OVER_H_GHZ_PER_K


@dataclass(frozen=True)
class OhmicBathSpec:
    g: float
    omega_c: float
    temperature: float
    eta: float = 1e-4

    def __post_init__(self):
        if self.g < 0:
            raise SpecError(f"bath coupling must be non-negative, got {self.g}")
        if self.omega_c <= 0 or self.temperature <= 0 or self.eta <= 0:
            raise SpecError("bath cutoff, temperature and eta must be positive")


@dataclass(frozen=True)
class FluctuatorEnsembleSpec:
    b: float
    gamma_min: float = 1e-4
    gamma_max: float = 0.05
    count: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise SpecError(f"fluctuator count must be at least 1, got {self.count}")
        if not 0 < self.gamma_min <= self.gamma_max:
            raise SpecError(f"need 0 < gamma_min <= gamma_max, got {self.gamma_min}, {self.gamma_max}")
        if self.b < 0:
            raise SpecError(f"fluctuator coupling must be non-negative, got {self.b}")


@dataclass(frozen=True, eq=False)
class FluctuatorRealization:
    b: float
    t_max: float
    rates: np.ndarray
    initial_signs: np.ndarray
    switch_times: tuple

    @property
    def count(self):
        return len(self.rates)


@dataclass(frozen=True)
class HybridNoiseModel:
    """Two Ohmic channels (charge x, Josephson z) plus an optional fluctuator ensemble."""

    x: OhmicBathSpec = None
    z: OhmicBathSpec = None
    fluctuators: FluctuatorEnsembleSpec = None
    resample_rates: bool = True

    @property
    def channels(self):
        return {name: spec for name, spec in (("x", self.x), ("z", self.z))
                if spec is not None and spec.g > 0}

    @property
    def is_stochastic(self):
        return self.fluctuators is not None and self.fluctuators.b > 0

    def without_fluctuators(self):
        return replace(self, fluctuators=None)

    def x_only(self):
        return replace(self, z=None, fluctuators=None)

    def with_params(self, **params):
        """Update learned parameters by name (g_x, omega_c_x, g_z, omega_c_z, b, gamma_max)."""
        x, z, fl = self.x, self.z, self.fluctuators
        if "g_x" in params or "omega_c_x" in params:
            x = replace(x, g=params.get("g_x", x.g), omega_c=params.get("omega_c_x", x.omega_c))
        if "g_z" in params or "omega_c_z" in params:
            z = replace(z, g=params.get("g_z", z.g), omega_c=params.get("omega_c_z", z.omega_c))
        if ("b" in params or "gamma_max" in params) and fl is None:
            fl = FluctuatorEnsembleSpec(b=params.get("b", 0.0), gamma_max=params.get("gamma_max", 0.05))
        elif "b" in params or "gamma_max" in params:
            fl = replace(fl, b=params.get("b", fl.b), gamma_max=params.get("gamma_max", fl.gamma_max))
        return replace(self, x=x, z=z, fluctuators=fl)


def ohmic_spectrum_at(spec, omega):
    """Ohmic spectral density at linear frequency `omega` (GHz); returns a rate in 1/ns.

    gamma(w) = 2*pi*eta*g^2*w*exp(-|w|/w_c)/(1 - exp(-w/T)) evaluated with angular
    w, g, w_c, T, i.e. (2*pi)^4 * eta * g^2 * f * exp(-|f|/f_c) / (1 - exp(-f/T)).
    """
    f = np.asarray(omega, dtype=float)
    prefactor = TWO_PI**4 * spec.eta * spec.g**2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        thermal = np.where(f == 0.0, spec.temperature, f / -np.expm1(-f / spec.temperature))
    value = prefactor * thermal * np.exp(-np.abs(f) / spec.omega_c)
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True, eq=False)
class CorrelationGrid:
    """Bath correlation C(tau) (1/ns^2) on a uniform grid tau >= 0."""

    spec: OhmicBathSpec
    taus: np.ndarray
    values: np.ndarray

    @property
    def spacing(self):
        return float(self.taus[1] - self.taus[0])

    @cached_property
    def _splines(self):
        return CubicSpline(self.taus, self.values.real), CubicSpline(self.taus, self.values.imag)

    def at(self, tau):
        """C at arbitrary |tau| <= tau_max; negative arguments use C(-tau) = C(tau)*."""
        tau = np.asarray(tau, dtype=float)
        re, im = self._splines
        mag = np.abs(tau)
        if np.any(mag > self.taus[-1] * (1 + 1e-12)):
            raise SpecError(f"tau beyond the correlation grid ({self.taus[-1]:.1f} ns)")
        return re(mag) + 1j * np.sign(tau + (tau == 0)) * im(mag)

    def memory_time(self, threshold=1e-6):
        """Smallest tau beyond which |C| stays below threshold*|C(0)|; None if never on this grid."""
        above = np.nonzero(np.abs(self.values) >= threshold * abs(self.values[0]))[0]
        last = above[-1]
        if last == len(self.values) - 1:
            return None
        return float(self.taus[last + 1])


def frequency_window(spec, factor=25.0):
    return factor * max(spec.omega_c, spec.temperature)


@lru_cache(maxsize=64)
def _fft_correlation(spec, tau_max, oversample=4, min_points=2**14):
    window = frequency_window(spec)
    # The frequency sum is periodic in tau with period 1/df; keep tau_max within half a period
    n_freq = min_points
    while n_freq / (2.0 * window) < 2.0 * tau_max:
        n_freq *= 2
    freqs = np.linspace(-window, window, n_freq, endpoint=False)
    df = freqs[1] - freqs[0]
    weights = ohmic_spectrum_at(spec, freqs)

    size = n_freq * oversample
    dtau = 1.0 / (size * df)
    n_tau = int(np.floor(tau_max / dtau)) + 2
    taus = np.arange(n_tau) * dtau
    transform = np.fft.fft(weights, n=size)[:n_tau]
    values = df * np.exp(2j * np.pi * window * taus) * transform
    # Endpoint correction for the kink of exp(-|f|/f_c) at f = 0, which sits on a node
    values -= df**2 / 12.0 * 2.0 * ohmic_spectrum_at(spec, 0.0) / spec.omega_c
    return taus, values


def correlation_function_grid(spec, tau_max, n_points=None):
    """C(tau) = (1/2pi) * integral of gamma(w) exp(-i w tau) dw on [0, tau_max].

    The frequency quadrature is a uniform rule over [-W, W], W = 25*max(omega_c, T),
    with at least 2**14 points and enough resolution that tau_max is not aliased.
    With `n_points` the result is resampled on an n_points uniform grid.
    """
    if tau_max <= 0:
        raise SpecError(f"tau_max must be positive, got {tau_max}")
    taus, values = _fft_correlation(spec, float(tau_max))
    grid = CorrelationGrid(spec=spec, taus=taus, values=values)
    if n_points is not None:
        resampled = np.linspace(0.0, tau_max, n_points)
        grid = CorrelationGrid(spec=spec, taus=resampled, values=grid.at(resampled))
    return grid


def correlation_at_zero(spec):
    """Independent adaptive-quadrature value of C(0)."""
    scale = max(spec.omega_c, spec.temperature)
    value, _ = integrate.quad(lambda f: ohmic_spectrum_at(spec, f), -60.0 * scale, 60.0 * scale,
                              points=[0.0], limit=400, epsabs=0.0, epsrel=1e-11)
    return value


def memory_grid(spec, span, threshold=1e-6):
    """Correlation grid long enough to contain the memory time (capped at the schedule span)."""
    tau_max = min(span, 16384 / (4.0 * frequency_window(spec)))
    while True:
        grid = correlation_function_grid(spec, tau_max)
        tau_mem = grid.memory_time(threshold)
        if tau_mem is not None or tau_max >= span:
            return grid, (tau_mem if tau_mem is not None else span)
        tau_max = min(span, 2.0 * tau_max)


def sample_fluctuators(spec, t_max, rng_seed, rates=None):
    if t_max <= 0:
        raise SpecError(f"t_max must be positive, got {t_max}")
    rng = np.random.default_rng(rng_seed)
    if rates is None:
        rates = draw_rates(spec, rng)
    signs = rng.choice(np.array([-1, 1]), size=spec.count)
    switches = []
    for rate in rates:
        # Exponential waiting times, drawn in blocks until past t_max
        expected = int(rate * t_max + 5 * np.sqrt(rate * t_max + 1) + 10)
        times = np.cumsum(rng.exponential(1.0 / rate, size=expected))
        while times[-1] <= t_max:
            more = times[-1] + np.cumsum(rng.exponential(1.0 / rate, size=expected))
            times = np.concatenate([times, more])
        switches.append(times[times <= t_max])
    return FluctuatorRealization(b=spec.b, t_max=t_max, rates=np.asarray(rates, dtype=float),
                                 initial_signs=signs, switch_times=tuple(switches))


def draw_rates(spec, rng):
    log_rates = rng.uniform(np.log(spec.gamma_min), np.log(spec.gamma_max), size=spec.count)
    return np.exp(log_rates)


def fluctuator_values(real, times):
    """Vectorized sum_k b*chi_k(t) for an array of times."""
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(times > real.t_max * (1 + 1e-12)):
        raise SpecError(f"times must lie in [0, {real.t_max}] ns")
    total = np.zeros(times.shape)
    for sign, switches in zip(real.initial_signs, real.switch_times):
        flips = np.searchsorted(switches, times, side="right")
        total += sign * (1 - 2 * (flips % 2))
    return real.b * total


def fluctuator_value_at(real, t):
    return float(fluctuator_values(real, np.array([t]))[0])


def rtn_coherence(gamma, b_eff, t):
    """Average of exp(i*2*b_eff*int chi) for one telegraph source switching at rate gamma."""
    t = np.asarray(t, dtype=float)
    mu = np.sqrt(complex(gamma**2 - 4.0 * b_eff**2))
    if abs(mu) < 1e-15:
        return np.exp(-gamma * t) * (1.0 + gamma * t)
    return np.real(np.exp(-gamma * t) * (np.cosh(mu * t) + gamma / mu * np.sinh(mu * t)))


def lorentzian_psd(gamma, b, f):
    """One-sided PSD of b*chi(t) with autocorrelation b^2 exp(-2 gamma tau)."""
    f = np.asarray(f, dtype=float)
    return 4.0 * b**2 * (2.0 * gamma) / ((2.0 * gamma) ** 2 + (TWO_PI * f) ** 2)


def ensemble_psd_estimate(spec, n_realizations=200, duration=None, sample_dt=None, seed=None):
    """Welch-averaged one-sided PSD of sum_k b*chi_k(t) over independent realizations."""
    if n_realizations < 100:
        raise SpecError(f"need at least 100 realizations, got {n_realizations}")
    duration = duration or 20.0 / spec.gamma_min
    sample_dt = sample_dt or 0.1 / spec.gamma_max
    times = np.arange(0.0, duration, sample_dt)
    nperseg = min(len(times), 2 ** int(np.floor(np.log2(len(times)))))
    base = spec.seed if seed is None else seed

    accumulated = None
    for index in range(n_realizations):
        real = sample_fluctuators(spec, duration, (base, index))
        freqs, psd = signal.welch(fluctuator_values(real, times), fs=1.0 / sample_dt,
                                  nperseg=nperseg // 4, detrend=False)
        accumulated = psd if accumulated is None else accumulated + psd
    log.debug("PSD over %d realizations, %d samples each", n_realizations, len(times))
    return freqs[1:], accumulated[1:] / n_realizations


def psd_slope(freqs, psd, f_lo, f_hi):
    band = (freqs >= f_lo) & (freqs <= f_hi)
    if band.sum() < 3:
        raise SpecError(f"fewer than three PSD points in [{f_lo}, {f_hi}] GHz")
    slope, _ = np.polyfit(np.log(freqs[band]), np.log(psd[band]), 1)
    return float(slope)
