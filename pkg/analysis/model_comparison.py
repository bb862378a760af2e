import logging
from dataclasses import replace

import numpy as np
import pandas as pd

from analysis.errors import SpecError
from analysis.fit_pipeline import run_three_step_fit
from analysis.pulse_control import U3Params
from analysis.transmon_spectrum import truncate
from utils.data_loader import ExperimentKind, relative_error, relative_error_summary

log = logging.getLogger(__name__)

SIMPLIFIED_STEP2 = {"SM1": "dd", "SM2": "free"}


def simplified_setup(model, variant):
    """Two-level system with instantaneous ideal DD pulses."""
    return replace(model, spectrum=truncate(model.spectrum, 2), ideal_pulses=True, label=variant)


def predict_states(fit, model, base, states, kinds, dataset=None, n_traj=None):
    """Simulated curves for every (state, kind) and, where measured, per-instant relative errors.

    Returns (curves keyed like the dataset, long table of errors).
    """
    noise = fit.noise_model(base)
    curves, rows = {}, []
    for kind in kinds:
        kind = ExperimentKind(kind)
        measured = [dataset.get((kind.value, u3.key())) for u3 in states] if dataset else [None] * len(states)
        grid = next((exp.instants for exp in measured if exp is not None), None)
        sims = model.simulate(states, kind, noise, n_traj=n_traj, grid=grid)
        for u3, sim, exp in zip(states, sims, measured):
            curves[(kind.value, u3.key())] = sim
            if exp is None:
                continue
            errors = relative_error(exp, sim)
            theta, phi, lam = u3.key()
            rows += [{"model": fit.label, "kind": kind.value, "theta_deg": theta, "phi_deg": phi,
                      "lambda_deg": lam, "instant_ns": t, "exp_mean": e, "sim_mean": s, "relative_error": r}
                     for t, e, s, r in zip(exp.instants, exp.mean, sim.mean, errors)]
    table = pd.DataFrame(rows, columns=["model", "kind", "theta_deg", "phi_deg", "lambda_deg", "instant_ns",
                                        "exp_mean", "sim_mean", "relative_error"])
    log.info("predicted %d curves for model %s", len(curves), fit.label)
    return curves, table


def build_simplified_model(variant, dataset, model, base, ranges=None, resolution=None, workers=None):
    """SM1 (Step II on DD curves) or SM2 (Step II on free curves); four parameters, no fluctuators."""
    if variant not in SIMPLIFIED_STEP2:
        raise SpecError(f"unknown simplified model '{variant}'")
    setup = simplified_setup(model, variant)
    return run_three_step_fit(dataset, setup, base.without_fluctuators(), ranges, resolution, n_traj=1,
                              workers=workers, step2_kind=SIMPLIFIED_STEP2[variant], include_fluctuators=False,
                              label=variant)


def compare_models(fits, model, base, dataset, n_traj=None):
    """Relative-error summary per model and kind, plus the combined free + dd row.

    Fits labelled SM1 or SM2 are simulated on the reduced two-level setup.
    """
    u3s = [U3Params.from_degrees(*key) for key in sorted({key for _, key in dataset})]
    kinds = sorted({kind for kind, _ in dataset})
    rows, tables = [], []
    for fit in fits:
        setup = model if fit.label not in SIMPLIFIED_STEP2 else simplified_setup(model, fit.label)
        _, table = predict_states(fit, setup, base, u3s, kinds, dataset, n_traj)
        tables.append(table)
        groups = [(kind, table[table["kind"] == kind]) for kind in kinds] + [("combined", table)]
        for kind, part in groups:
            if part.empty:
                continue
            summary = relative_error_summary(part["relative_error"].to_numpy())
            rows.append({"model": fit.label, "kind": kind, **summary.to_dict()})
    summary = pd.DataFrame(rows)
    errors = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame()
    return summary, errors


def ordering_holds(summary):
    """Full model best on combined error, SM1 better on dd, SM2 better on free (mean |relative error|)."""
    score = summary.set_index(["model", "kind"])["mean_abs"]
    checks = [
        score[("full", "combined")] <= score[("SM1", "combined")],
        score[("full", "combined")] <= score[("SM2", "combined")],
        score[("SM1", "dd")] <= score[("SM2", "dd")],
        score[("SM2", "free")] <= score[("SM1", "free")],
    ]
    return bool(np.all(checks))
