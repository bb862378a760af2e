import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd

from analysis.errors import SchemaError, SpecError
from analysis.noise_bath import FluctuatorEnsembleSpec, HybridNoiseModel, OhmicBathSpec, mk_to_ghz
from analysis.pulse_control import U3Params, apply_drag, calibrate_virtual_z, make_envelope
from analysis.redfield_engine import PropagationOptions
from analysis.transmon_spectrum import DeviceSpec

log = logging.getLogger(__name__)

DEVICE_KEYS = {
    "qubit_freq_ghz": float,
    "anharmonicity_ghz": float,
    "t1_us": float,
    "t2_us": float,
    "sx_len_ns": float,
    "readout_error": float,
    "sx_gate_error": float,
    "charge_coupling_scale": float,
    "josephson_coupling_scale": float,
}

NOISE_DEFAULTS = {
    "g_x_ghz": 0.0,
    "omega_c_x_ghz": 1.0,
    "g_z_ghz": 0.0,
    "omega_c_z_ghz": 0.01,
    "b_ghz": 0.0,
    "gamma_min_ghz": 1e-4,
    "gamma_max_ghz": 0.05,
    "temperature_mk": 20.0,
    "eta_ghz2": 1e-4,
    "n_fluctuators": 10,
    "resample_rates": True,
}


@dataclass(frozen=True)
class RunConfig:
    t_g_ns: float = 70.0
    sigma_ratio: float = 1.0 / 6.0
    drag_alpha: float = 1.0
    gate_composition: str = "two-halves"
    virtual_z: str = "calibrated"
    dt_ns: float = 0.1
    micro_dt_ns: float = 0.02
    sample_rate_gsps: float = 10.0
    n_trajectories: int = 600
    memory_cutoff_ns: float = None
    base_seed: int = 1234
    n_instants: int = 70
    total_ns: float = 19600.0
    resolution: int = 20
    n_levels: int = 4
    n_max: int = 50
    bootstrap_resamples: int = 10
    spam_mode: str = "additive"
    spam_order: str = "bootstrap-then-shift"
    dd_placement: str = "centered"
    dd_cycles_per_instant: int = 1
    preparation: str = "ideal"

    def __post_init__(self):
        if self.n_instants < 2:
            raise SpecError(f"n_instants must be at least 2, got {self.n_instants}")
        if self.dd_placement not in ("centered", "edge"):
            raise SpecError(f"dd_placement must be centered or edge, got '{self.dd_placement}'")
        if self.virtual_z not in ("calibrated", "none"):
            raise SpecError(f"virtual_z must be calibrated or none, got '{self.virtual_z}'")
        if self.preparation not in ("ideal", "compiled"):
            raise SpecError(f"preparation must be ideal or compiled, got '{self.preparation}'")
        if self.n_trajectories < 1 or self.resolution < 2:
            raise SpecError("n_trajectories must be >= 1 and resolution >= 2")

    @property
    def spacing_ns(self):
        return self.total_ns / self.n_instants

    @property
    def cycle_ns(self):
        return self.spacing_ns / self.dd_cycles_per_instant

    def envelope(self, spectrum):
        """Calibrated pi-pulse envelope of the configured length, with DRAG when drag_alpha != 0."""
        env = make_envelope(np.pi, self.t_g_ns, self.sigma_ratio * self.t_g_ns)
        if self.drag_alpha:
            env = apply_drag(env, self.drag_alpha, spectrum.anharmonicity)
        return env

    def frame_angles(self, spectrum):
        """Virtual-Z angles applied around every schedule pulse; empty when calibration is off."""
        if self.virtual_z == "none":
            return ()
        return calibrate_virtual_z(spectrum, self.envelope(spectrum), self.micro_dt_ns, np.pi, self.gate_composition)

    def options(self, store_instants=(), workers=None):
        return PropagationOptions(
            dt=self.dt_ns,
            micro_dt=self.micro_dt_ns,
            memory_cutoff=self.memory_cutoff_ns,
            store_instants=tuple(float(t) for t in store_instants),
            workers=workers,
        )

    def as_dict(self):
        return asdict(self)


def read_key_values(path):
    """Two-column key,value table as a dict of raw strings."""
    if not os.path.exists(path):
        raise SchemaError(f"configuration file {path} does not exist")
    frame = pd.read_csv(path, dtype=str, comment="#", skipinitialspace=True, keep_default_na=False)
    if list(frame.columns[:2]) != ["key", "value"]:
        raise SchemaError(f"{path}: expected a key,value header", line=1)
    values = {}
    for row, (key, value) in enumerate(zip(frame["key"].str.strip(), frame["value"].str.strip())):
        if key in values:
            raise SchemaError(f"{path}: duplicate key", line=row + 2, field=key)
        values[key] = value
    return values


def _convert(path, key, raw, kind, line=None):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if raw == "" or raw.lower() in ("none", "nan"):
            return None
        return kind(float(raw)) if kind is int else kind(raw)
    except ValueError:
        raise SchemaError(f"{path}: cannot read '{raw}' as {kind.__name__}", line=line, field=key) from None


def _typed(path, raw, allowed):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        keys = list(raw)
        raise SchemaError(f"{path}: unknown key", line=keys.index(unknown[0]) + 2, field=unknown[0])
    keys = list(raw)
    return {key: _convert(path, key, value, allowed[key], keys.index(key) + 2) for key, value in raw.items()}


def load_device(path, name=None):
    values = _typed(path, read_key_values(path), DEVICE_KEYS)
    for required in ("qubit_freq_ghz", "anharmonicity_ghz"):
        if values.get(required) is None:
            raise SchemaError(f"{path}: missing required key", field=required)
    values = {k: v for k, v in values.items() if v is not None}
    name = name or os.path.splitext(os.path.basename(path))[0]
    return DeviceSpec(name=name, **values)


def noise_from_values(values):
    temperature = mk_to_ghz(values["temperature_mk"])
    fluctuators = None
    if values["b_ghz"] > 0:
        fluctuators = FluctuatorEnsembleSpec(
            b=values["b_ghz"],
            gamma_min=values["gamma_min_ghz"],
            gamma_max=values["gamma_max_ghz"],
            count=int(values["n_fluctuators"]),
        )
    return HybridNoiseModel(
        x=OhmicBathSpec(g=values["g_x_ghz"], omega_c=values["omega_c_x_ghz"], temperature=temperature,
                        eta=values["eta_ghz2"]),
        z=OhmicBathSpec(g=values["g_z_ghz"], omega_c=values["omega_c_z_ghz"], temperature=temperature,
                        eta=values["eta_ghz2"]),
        fluctuators=fluctuators,
        resample_rates=bool(values["resample_rates"]),
    )


def load_noise_model(path):
    allowed = {key: (bool if isinstance(default, bool) else type(default)) for key, default in NOISE_DEFAULTS.items()}
    values = dict(NOISE_DEFAULTS)
    values.update({k: v for k, v in _typed(path, read_key_values(path), allowed).items() if v is not None})
    return noise_from_values(values)


def noise_to_values(noise):
    """Inverse of noise_from_values; used to write fitted models back to disk."""
    x, z, fl = noise.x, noise.z, noise.fluctuators
    spec = x or z
    out = dict(NOISE_DEFAULTS)
    out.update({
        "g_x_ghz": x.g if x else 0.0,
        "omega_c_x_ghz": x.omega_c if x else NOISE_DEFAULTS["omega_c_x_ghz"],
        "g_z_ghz": z.g if z else 0.0,
        "omega_c_z_ghz": z.omega_c if z else NOISE_DEFAULTS["omega_c_z_ghz"],
        "resample_rates": noise.resample_rates,
    })
    if spec is not None:
        out["temperature_mk"] = spec.temperature / mk_to_ghz(1.0)
        out["eta_ghz2"] = spec.eta
    if fl is not None:
        out.update({"b_ghz": fl.b, "gamma_min_ghz": fl.gamma_min, "gamma_max_ghz": fl.gamma_max,
                    "n_fluctuators": fl.count})
    return out


def write_noise_model(noise, path):
    values = noise_to_values(noise)
    pd.DataFrame({"key": list(values), "value": [str(v) for v in values.values()]}).to_csv(path, index=False)
    return path


def load_run_config(path=None, **overrides):
    allowed = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    if path is not None:
        values = {k: v for k, v in _typed(path, read_key_values(path), allowed).items() if v is not None}
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig(**values)
    log.debug("run config: %s", config)
    return config


def load_states(path):
    """Initial-state list: rows of theta_deg, phi_deg, lambda_deg."""
    frame = pd.read_csv(path, comment="#", skipinitialspace=True)
    missing = [c for c in ("theta_deg", "phi_deg", "lambda_deg") if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}", line=1, field=missing[0])
    states = []
    for row, values in enumerate(frame[["theta_deg", "phi_deg", "lambda_deg"]].itertuples(index=False)):
        try:
            states.append(U3Params.from_degrees(*(float(v) for v in values)))
        except ValueError:
            raise SchemaError(f"{path}: non-numeric angle", line=row + 2) from None
    return states
