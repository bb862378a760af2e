import io
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd

from analysis.errors import SchemaError, SpecError
from analysis.pulse_control import U3Params

log = logging.getLogger(__name__)

RECORD_COLUMNS = ["theta_deg", "phi_deg", "lambda_deg", "kind", "shots", "instant_ns", "count0", "count1"]
BLOCK_COLUMNS = ["instant_ns", "count0", "count1"]
CURVE_COLUMNS = ["instant_ns", "mean", "half_width"]


class ExperimentKind(str, Enum):
    FREE = "free"
    DD = "dd"


HEADER_KEYS = {
    "theta_deg": float,
    "phi_deg": float,
    "lambda_deg": float,
    "kind": ExperimentKind,
    "shots": int,
    "total_ns": float,
    "n_instants": int,
}


@dataclass(frozen=True, eq=False)
class DecayCurve:
    """Fidelity per instant with a 2-sigma half width."""

    instants: np.ndarray
    mean: np.ndarray
    half_width: np.ndarray
    label: str = ""

    def __post_init__(self):
        instants = np.asarray(self.instants, dtype=float)
        mean = np.asarray(self.mean, dtype=float)
        half_width = np.asarray(self.half_width, dtype=float)
        if not (instants.shape == mean.shape == half_width.shape) or instants.ndim != 1:
            raise SpecError("instants, mean and half_width must be 1-D arrays of equal length")
        if np.any(half_width < 0) or not np.all(np.isfinite(mean)):
            raise SpecError("half widths must be non-negative and means finite")
        object.__setattr__(self, "instants", instants)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "half_width", half_width)

    @property
    def stderr(self):
        return self.half_width / 2.0

    @property
    def exceeds_one(self):
        return bool(np.any(self.mean > 1.0 + 1e-6))

    def same_grid(self, other, tol=1e-6):
        return self.instants.shape == other.instants.shape and np.allclose(self.instants, other.instants, atol=tol)


@dataclass(frozen=True, eq=False)
class ExperimentRecord:
    state: U3Params
    kind: ExperimentKind
    instants: np.ndarray
    shots: int
    counts0: np.ndarray
    counts1: np.ndarray = field(default=None)
    total_ns: float = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        counts0 = np.asarray(self.counts0, dtype=np.int64)
        counts1 = self.shots - counts0 if self.counts1 is None else np.asarray(self.counts1, dtype=np.int64)
        object.__setattr__(self, "instants", np.asarray(self.instants, dtype=float))
        object.__setattr__(self, "counts0", counts0)
        object.__setattr__(self, "counts1", counts1)
        if self.shots <= 0:
            raise SpecError(f"shots must be positive, got {self.shots}")
        if np.any(counts0 < 0) or np.any(counts1 < 0) or np.any(counts0 + counts1 != self.shots):
            raise SpecError("counts0 + counts1 must equal shots at every instant")
        if self.total_ns is not None and len(self.instants) and self.instants[-1] > self.total_ns + 1e-6:
            raise SpecError(f"instant {self.instants[-1]} ns lies beyond the {self.total_ns} ns experiment")

    @property
    def empirical(self):
        return self.counts0 / self.shots

    @property
    def key(self):
        return self.kind.value, self.state.key()

    @property
    def span(self):
        """Experiment length: the declared total, else the instant count times the spacing."""
        if self.total_ns is not None:
            return float(self.total_ns)
        if len(self.instants) < 2:
            return float(self.instants[-1]) if len(self.instants) else 0.0
        return float(len(self.instants) * np.median(np.diff(self.instants)))


def _content_lines(lines, start=0):
    """(1-based line number, text) of the non-blank, non-comment lines from `start` on."""
    return [(start + i + 1, text) for i, text in enumerate(lines[start:])
            if text.strip() and not text.lstrip().startswith("#")]


def load_experiment_records(path):
    """Records from a count file, in either layout.

    The canonical layout is one block per (state, kind): a `record,key=value,...` header
    followed by an instant_ns,count0,count1 table. A flat long table with one row per
    instant (RECORD_COLUMNS) is read as well.
    """
    if not os.path.isfile(path):
        raise SchemaError(f"dataset {path} does not exist")
    with open(path) as handle:
        lines = handle.readlines()
    content = _content_lines(lines)
    if not content:
        return []
    if content[0][1].startswith("record,"):
        records = _read_blocks(path, lines)
    else:
        records = _read_long_table(path)
    log.info("loaded %d experiment records from %s", len(records), path)
    return records


def _header_values(path, text, line):
    values = {}
    for part in text.strip().split(",")[1:]:
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep:
            raise SchemaError(f"{path}: record header entries must read key=value", line=line, field=key)
        if key not in HEADER_KEYS:
            raise SchemaError(f"{path}: unknown record header key", line=line, field=key)
        values[key] = value.strip()
    missing = [key for key in HEADER_KEYS if key not in values]
    if missing:
        raise SchemaError(f"{path}: record header lacks {missing}", line=line, field=missing[0])

    out = {}
    for key, kind in HEADER_KEYS.items():
        raw = values[key]
        try:
            out[key] = kind(int(float(raw))) if kind is int else kind(raw.lower() if kind is ExperimentKind else raw)
        except ValueError:
            raise SchemaError(f"{path}: cannot read '{raw}' in the record header", line=line, field=key) from None
    for key in ("shots", "total_ns", "n_instants"):
        if out[key] <= 0:
            raise SchemaError(f"{path}: {key} must be positive", line=line, field=key)
    return out


def _read_blocks(path, lines):
    content = _content_lines(lines)
    starts = [n for n, text in content if text.startswith("record,")]
    if content[0][0] != starts[0]:
        raise SchemaError(f"{path}: counts before the first record header", line=content[0][0])
    records = []
    for index, start in enumerate(starts):
        stop = starts[index + 1] - 1 if index + 1 < len(starts) else len(lines)
        header = _header_values(path, lines[start - 1], start)
        body = [(n, text) for n, text in _content_lines(lines[:stop], start)]
        if not body or [c.strip() for c in body[0][1].split(",")] != BLOCK_COLUMNS:
            raise SchemaError(f"{path}: a record header must be followed by {','.join(BLOCK_COLUMNS)}",
                              line=body[0][0] if body else start)
        rows = body[1:]
        if len(rows) != header["n_instants"]:
            raise SchemaError(f"{path}: record holds {len(rows)} instants, header declares {header['n_instants']}",
                              line=start, field="n_instants")
        frame = pd.read_csv(io.StringIO("".join(text for _, text in body)), skipinitialspace=True)
        numbers = [n for n, _ in rows]
        for column in BLOCK_COLUMNS:
            values = pd.to_numeric(frame[column], errors="coerce")
            bad = values.isna().to_numpy()
            if bad.any():
                raise SchemaError(f"{path}: non-numeric value", line=numbers[int(bad.argmax())], field=column)
            frame[column] = values
        instants = frame["instant_ns"].to_numpy(dtype=float)
        beyond = instants > header["total_ns"] + 1e-6
        if beyond.any() or np.any(np.diff(instants) <= 0):
            row = int(beyond.argmax()) if beyond.any() else int(np.argmax(np.diff(instants) <= 0)) + 1
            raise SchemaError(f"{path}: instants must increase within [0, total_ns]", line=numbers[row],
                              field="instant_ns")
        mismatch = (frame["count0"] + frame["count1"] != header["shots"]).to_numpy()
        if mismatch.any():
            row = int(mismatch.argmax())
            raise SchemaError(f"{path}: counts do not add up to shots at instant {instants[row]:g} ns",
                              line=numbers[row], field="count0+count1")
        records.append(ExperimentRecord(
            state=U3Params.from_degrees(header["theta_deg"], header["phi_deg"], header["lambda_deg"]),
            kind=header["kind"],
            instants=instants,
            shots=header["shots"],
            counts0=frame["count0"].to_numpy(dtype=np.int64),
            counts1=frame["count1"].to_numpy(dtype=np.int64),
            total_ns=header["total_ns"],
        ))
    return records


def _read_long_table(path):
    frame = pd.read_csv(path, comment="#", skipinitialspace=True)
    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}", line=1, field=missing[0])
    if frame.empty:
        return []

    # Line numbers count the header as line 1
    for column in ("theta_deg", "phi_deg", "lambda_deg", "shots", "instant_ns", "count0", "count1"):
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = values.isna()
        if bad.any():
            raise SchemaError(f"{path}: non-numeric value", line=int(bad.idxmax()) + 2, field=column)
        frame[column] = values
    kinds = frame["kind"].astype(str).str.strip().str.lower()
    unknown = ~kinds.isin([k.value for k in ExperimentKind])
    if unknown.any():
        raise SchemaError(f"{path}: unknown experiment kind '{frame['kind'].iloc[int(unknown.values.argmax())]}'",
                          line=int(unknown.idxmax()) + 2, field="kind")
    frame["kind"] = kinds

    if (frame["shots"] <= 0).any():
        raise SchemaError(f"{path}: shots must be positive", line=int((frame["shots"] <= 0).idxmax()) + 2,
                          field="shots")
    mismatch = frame["count0"] + frame["count1"] != frame["shots"]
    if mismatch.any():
        row = int(mismatch.idxmax())
        raise SchemaError(f"{path}: counts do not add up to shots at instant {frame.loc[row, 'instant_ns']} ns",
                          line=row + 2, field="count0+count1")

    records = []
    for (theta, phi, lam, kind), group in frame.groupby(["theta_deg", "phi_deg", "lambda_deg", "kind"], sort=False):
        if group["shots"].nunique() != 1:
            raise SchemaError(f"{path}: shots vary within one record", line=int(group.index[0]) + 2, field="shots")
        group = group.sort_values("instant_ns")
        records.append(ExperimentRecord(
            state=U3Params.from_degrees(theta, phi, lam),
            kind=kind,
            instants=group["instant_ns"].to_numpy(),
            shots=int(group["shots"].iloc[0]),
            counts0=group["count0"].to_numpy(dtype=np.int64),
            counts1=group["count1"].to_numpy(dtype=np.int64),
        ))
    return records


def write_experiment_records(records, path, layout="records"):
    """Write counts in the record-block layout, or as one flat table with layout="long"."""
    if layout == "long":
        return _write_long_table(records, path)
    if layout != "records":
        raise SpecError(f"unknown dataset layout '{layout}'")
    with open(path, "w") as handle:
        for rec in records:
            theta, phi, lam = rec.state.degrees()
            handle.write(f"record,theta_deg={theta:.12g},phi_deg={phi:.12g},lambda_deg={lam:.12g},"
                         f"kind={rec.kind.value},shots={rec.shots},total_ns={rec.span:.12g},"
                         f"n_instants={len(rec.instants)}\n")
            pd.DataFrame({"instant_ns": rec.instants, "count0": rec.counts0, "count1": rec.counts1}).to_csv(
                handle, index=False)
    return path


def _write_long_table(records, path):
    frames = []
    for rec in records:
        theta, phi, lam = rec.state.degrees()
        frames.append(pd.DataFrame({
            "theta_deg": theta,
            "phi_deg": phi,
            "lambda_deg": lam,
            "kind": rec.kind.value,
            "shots": rec.shots,
            "instant_ns": rec.instants,
            "count0": rec.counts0,
            "count1": rec.counts1,
        }))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=RECORD_COLUMNS)
    table[RECORD_COLUMNS].to_csv(path, index=False)
    return path


def bootstrap_curve(rec, n_resamples=10, seed=None, shift=0.0, label=""):
    """Resample the shots of every instant and report mean and 2*std of the resampled fidelities.

    `shift` is added to every resampled fidelity (shift-then-bootstrap SPAM handling).
    """
    if n_resamples < 2:
        raise SpecError(f"n_resamples must be at least 2, got {n_resamples}")
    rng = np.random.default_rng(seed)
    draws = rng.binomial(rec.shots, rec.empirical, size=(n_resamples, len(rec.instants))) / rec.shots
    draws = draws + shift
    return DecayCurve(
        instants=rec.instants,
        mean=draws.mean(axis=0),
        half_width=2.0 * draws.std(axis=0, ddof=1),
        label=label or f"{rec.kind.value} {rec.state.key()}",
    )


def _start_index(curve):
    hits = np.flatnonzero(np.isclose(curve.instants, 0.0, atol=1e-9))
    if not len(hits):
        raise SpecError("SPAM normalization needs an instant at t = 0")
    return int(hits[0])


def spam_normalize(curve, mode="additive"):
    start = curve.mean[_start_index(curve)]
    if mode == "additive":
        out = replace(curve, mean=curve.mean + (1.0 - start))
    elif mode == "multiplicative":
        if start <= 0:
            raise SpecError("multiplicative SPAM normalization needs a positive fidelity at t = 0")
        out = replace(curve, mean=curve.mean / start, half_width=curve.half_width / start)
    else:
        raise SpecError(f"unknown SPAM mode '{mode}'")
    if out.exceeds_one:
        log.warning("SPAM-normalized curve %s exceeds one (max %.4f)", curve.label, out.mean.max())
    return out


def empirical_curve(rec, n_resamples=10, seed=None, spam_mode="additive", spam_order="bootstrap-then-shift"):
    if spam_order == "bootstrap-then-shift":
        return spam_normalize(bootstrap_curve(rec, n_resamples, seed), spam_mode)
    if spam_order != "shift-then-bootstrap":
        raise SpecError(f"unknown SPAM order '{spam_order}'")
    start = rec.empirical[_start_index(rec)]
    if spam_mode != "additive":
        # Scaling commutes with resampling statistics
        return spam_normalize(bootstrap_curve(rec, n_resamples, seed), spam_mode)
    return bootstrap_curve(rec, n_resamples, seed, shift=1.0 - start)


def curves_by_key(records, n_resamples=10, seed=None, spam_mode="additive", spam_order="bootstrap-then-shift"):
    """Empirical curves keyed by (kind, state degrees); each record gets its own resampling stream."""
    curves = {}
    for index, rec in enumerate(records):
        stream = None if seed is None else (int(seed), index)
        curves[rec.key] = empirical_curve(rec, n_resamples, stream, spam_mode, spam_order)
    return curves


def relative_error(exp, sim):
    if not exp.same_grid(sim):
        raise SpecError("relative error needs matching instant grids")
    if np.any(exp.mean == 0):
        raise SpecError("experimental mean is zero at some instant")
    return (exp.mean - sim.mean) / exp.mean


def relative_error_summary(errors):
    errors = np.asarray(errors, dtype=float).ravel()
    q = np.percentile(errors, [5, 25, 75, 95])
    return pd.Series({
        "mean": errors.mean(),
        "median": np.median(errors),
        "p05": q[0],
        "p25": q[1],
        "p75": q[2],
        "p95": q[3],
        "max_abs": np.abs(errors).max(),
        "mean_abs": np.abs(errors).mean(),
    })


def curve_to_frame(curve):
    return pd.DataFrame({"instant_ns": curve.instants, "mean": curve.mean, "half_width": curve.half_width})


def curve_from_frame(frame, label=""):
    missing = [c for c in CURVE_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"curve table is missing {missing}", line=1, field=missing[0])
    return DecayCurve(
        instants=frame["instant_ns"].to_numpy(dtype=float),
        mean=frame["mean"].to_numpy(dtype=float),
        half_width=frame["half_width"].to_numpy(dtype=float),
        label=label,
    )


def write_curve(curve, path):
    curve_to_frame(curve).to_csv(path, index=False)
    return path


def read_curve(path):
    return curve_from_frame(pd.read_csv(path), label=os.path.splitext(os.path.basename(path))[0])
