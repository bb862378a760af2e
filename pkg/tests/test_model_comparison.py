import numpy as np
import pandas as pd
import pytest

from analysis.errors import SpecError
from analysis.experiment_schedules import ModelSetup, pauli_states
from analysis.fit_pipeline import FitResult
from analysis.model_comparison import (
    build_simplified_model,
    compare_models,
    ordering_holds,
    predict_states,
    simplified_setup,
)


@pytest.fixture
def deterministic(quito_noise):
    return quito_noise.without_fluctuators()


@pytest.fixture
def free_dataset(qubit_spectrum, small_run, deterministic):
    model = ModelSetup(spectrum=qubit_spectrum, run=small_run)
    states = pauli_states()
    curves = model.simulate(states, "free", deterministic)
    return model, {("free", u3.key()): curve for u3, curve in zip(states, curves)}


def test_simplified_setup_is_a_two_level_ideal_pulse_model(quito_spectrum, small_run):
    model = ModelSetup(spectrum=quito_spectrum, run=small_run)
    reduced = simplified_setup(model, "SM1")
    assert reduced.spectrum.n_levels == 2
    assert reduced.ideal_pulses and reduced.envelope is None
    assert reduced.label == "SM1"
    assert model.spectrum.n_levels == 4


def test_unknown_simplified_variant(qubit_spectrum, small_run, quito_noise):
    with pytest.raises(SpecError):
        build_simplified_model("SM3", {}, ModelSetup(spectrum=qubit_spectrum, run=small_run), quito_noise)


def test_prediction_against_its_own_curves(free_dataset, quito_noise, deterministic):
    model, dataset = free_dataset
    fit = FitResult.from_noise(deterministic)
    states = pauli_states()[:2]
    curves, errors = predict_states(fit, model, quito_noise, states, ["free"], dataset)
    assert set(curves) == {("free", u3.key()) for u3 in states}
    assert len(errors) == 2 * 5
    np.testing.assert_allclose(errors["relative_error"], 0.0, atol=1e-12)


def test_prediction_without_data_has_no_errors(free_dataset, quito_noise, deterministic):
    model, _ = free_dataset
    curves, errors = predict_states(FitResult.from_noise(deterministic), model, quito_noise, pauli_states()[:1],
                                    ["free"])
    assert len(curves) == 1 and errors.empty


def test_compare_models_summary(free_dataset, quito_noise, deterministic):
    model, dataset = free_dataset
    full = FitResult.from_noise(deterministic)
    weaker = FitResult.from_noise(deterministic.with_params(g_x=2e-3), label="SM2")
    summary, errors = compare_models([full, weaker], model, quito_noise, dataset)
    assert list(summary.columns[:2]) == ["model", "kind"]
    assert set(zip(summary["model"], summary["kind"])) == {
        ("full", "free"), ("full", "combined"), ("SM2", "free"), ("SM2", "combined")}
    score = summary.set_index(["model", "kind"])["mean_abs"]
    assert score[("full", "combined")] < 1e-12
    assert score[("SM2", "combined")] > score[("full", "combined")]
    assert set(errors["model"]) == {"full", "SM2"}


def test_ordering_check():
    rows = [("full", "free", 0.01), ("full", "dd", 0.01), ("full", "combined", 0.01),
            ("SM1", "free", 0.05), ("SM1", "dd", 0.02), ("SM1", "combined", 0.035),
            ("SM2", "free", 0.02), ("SM2", "dd", 0.06), ("SM2", "combined", 0.04)]
    summary = pd.DataFrame(rows, columns=["model", "kind", "mean_abs"])
    assert ordering_holds(summary)
    summary.loc[summary["model"].eq("SM1") & summary["kind"].eq("dd"), "mean_abs"] = 0.1
    assert not ordering_holds(summary)


@pytest.mark.slow
def test_sm2_fits_four_parameters(free_dataset, quito_noise):
    model, dataset = free_dataset
    ranges = {"I": (("omega_c_x", 1.0, 2.896, "linear"), ("g_x", 0.0, 1.1468e-2, "linear")),
              "II": (("omega_c_z", 1e-3, 1.038e-2, "linear"), ("g_z", 0.0, 8.826e-3, "linear"))}
    fit = build_simplified_model("SM2", dataset, model, quito_noise, ranges=ranges, resolution=3, workers=2)
    assert fit.label == "SM2"
    assert fit.b == 0.0 and len(fit.surfaces) == 2
    assert fit.noise_model(quito_noise).fluctuators is None
