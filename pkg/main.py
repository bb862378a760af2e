import argparse
import logging
import os
import sys
from dataclasses import asdict

import numpy as np
import pandas as pd

from analysis import __version__
from analysis.errors import TransmonNoiseError
from analysis.experiment_schedules import ModelSetup, haar_random_states, pauli_states, simulate_decay_curve
from analysis.fit_pipeline import FitResult, extract_t1, run_three_step_fit, synthesize_dataset
from analysis.model_comparison import build_simplified_model, compare_models, predict_states
from analysis.pulse_control import U3Params, envelope_spectrum, gate_report, leakage_overlap
from analysis.transmon_spectrum import device_spectrum
from utils.config_loader import load_device, load_noise_model, load_run_config, load_states, noise_to_values, \
    write_noise_model
from utils.data_loader import (
    curve_to_frame,
    curves_by_key,
    load_experiment_records,
    write_curve,
    write_experiment_records,
)
from utils.plotting import plot_csv
from utils.run_manifest import write_manifest

log = logging.getLogger("transmon_noise")

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


def _resolve(value, folder):
    """Shipped name (quito, lima, ...) or an explicit path."""
    if value is None or os.path.exists(value):
        return value
    candidate = os.path.join(DATA_DIR, folder, f"{value}.csv")
    return candidate if os.path.exists(candidate) else value


def _state(text):
    try:
        theta, phi, lam = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected theta,phi,lambda in degrees, got '{text}'") from None
    return U3Params.from_degrees(theta, phi, lam)


def _setup(args, **overrides):
    run = load_run_config(_resolve(args.run_config, ""), **overrides)
    device = load_device(_resolve(args.device, "devices"))
    spectrum = device_spectrum(device, run.n_levels, run.n_max)
    noise_path = _resolve(getattr(args, "noise", None) or args.device, "noise")
    noise = load_noise_model(noise_path)
    model = ModelSetup(spectrum=spectrum, run=run, workers=args.workers)
    config = {"run": run.as_dict(), "device": asdict(device), "noise": noise_to_values(noise)}
    return model, noise, config, [_resolve(args.run_config, ""), _resolve(args.device, "devices"), noise_path]


def _dataset(path, run):
    records = load_experiment_records(_resolve(path, "datasets"))
    return curves_by_key(records, run.bootstrap_resamples, run.base_seed, run.spam_mode, run.spam_order)


def _curves_table(curves):
    frames = []
    for (kind, key), curve in curves.items():
        frame = curve_to_frame(curve)
        frame.insert(0, "label", f"{kind} ({key[0]:g},{key[1]:g},{key[2]:g})")
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def cmd_fit(args):
    model, noise, config, inputs = _setup(args, resolution=args.resolution, n_trajectories=args.trajectories,
                                          base_seed=args.seed)
    dataset = _dataset(args.dataset, model.run)
    fit = run_three_step_fit(dataset, model, noise, workers=args.workers)
    outputs = fit.write(args.out)
    outputs.append(write_noise_model(fit.noise_model(noise), os.path.join(args.out, "noise_fit.csv")))
    log.info("fit: %s", ", ".join(f"{k}={v:.4g}" for k, v in fit.params().items()))
    return config, inputs + [_resolve(args.dataset, "datasets")], outputs


def cmd_simulate(args):
    model, noise, config, inputs = _setup(args, n_instants=args.instants, total_ns=args.total_ns,
                                          n_trajectories=args.trajectories, base_seed=args.seed)
    curve = simulate_decay_curve(model, args.state, args.kind, noise)
    theta, phi, lam = args.state.key()
    path = write_curve(curve, os.path.join(args.out, f"curve_{args.kind}_{theta:g}_{phi:g}_{lam:g}.csv"))
    if args.t1:
        t1, residual = extract_t1(curve)
        log.info("T1 = %.2f us (rms residual %.2e)", t1, residual)
    return config, inputs, [path]


def _prediction_states(args):
    if args.states:
        return load_states(_resolve(args.states, "states"))
    return pauli_states() + haar_random_states(10, args.seed if args.seed is not None else 0)


def cmd_predict(args):
    model, noise, config, inputs = _setup(args, n_trajectories=args.trajectories, base_seed=args.seed)
    fit = FitResult.from_noise(noise)
    dataset = _dataset(args.dataset, model.run) if args.dataset else None
    curves, errors = predict_states(fit, model, noise, _prediction_states(args), args.kinds, dataset)
    outputs = [os.path.join(args.out, "predicted_curves.csv")]
    _curves_table(curves).to_csv(outputs[0], index=False)
    if not errors.empty:
        outputs.append(os.path.join(args.out, "relative_errors.csv"))
        errors.to_csv(outputs[-1], index=False)
        outputs.append(plot_csv(outputs[-1]))
        summary = errors.groupby("kind")["relative_error"].agg(lambda e: np.abs(e).max())
        log.info("max |relative error| per kind: %s", summary.to_dict())
    return config, inputs, outputs


def cmd_gate(args):
    model, _, config, inputs = _setup(args, t_g_ns=args.tg, drag_alpha=args.drag, sigma_ratio=args.sigma_ratio)
    run = model.run
    report = gate_report(model.spectrum, t_g=run.t_g_ns, sigma_ratio=run.sigma_ratio, alphas=(run.drag_alpha,),
                         dt=run.micro_dt_ns, composition=run.gate_composition, frames=("bare", "calibrated"))
    env = run.envelope(model.spectrum)
    report["leakage_overlap"] = leakage_overlap(env, model.spectrum.anharmonicity, run.sample_rate_gsps)
    freqs, magnitude = envelope_spectrum(env, run.sample_rate_gsps)
    outputs = [os.path.join(args.out, "gate_report.csv"), os.path.join(args.out, "envelope_spectrum.csv")]
    report.to_csv(outputs[0], index=False)
    pd.DataFrame({"freq_ghz": freqs, "magnitude": magnitude}).to_csv(outputs[1], index=False)
    for row in report.itertuples():
        log.info("%s gate (%s frames): infidelity %.3e, leakage %.3e, phase error %.3e", row.axis, row.frames,
                 row.infidelity, row.leakage, row.phase_error)
    return config, inputs, outputs


def cmd_compare_models(args):
    model, noise, config, inputs = _setup(args, resolution=args.resolution, n_trajectories=args.trajectories,
                                          base_seed=args.seed)
    dataset = _dataset(args.dataset, model.run)
    full = run_three_step_fit(dataset, model, noise, workers=args.workers)
    sm1 = build_simplified_model("SM1", dataset, model, noise, workers=args.workers)
    sm2 = build_simplified_model("SM2", dataset, model, noise, workers=args.workers)
    summary, errors = compare_models([full, sm1, sm2], model, noise, dataset)
    outputs = [os.path.join(args.out, "model_comparison.csv"), os.path.join(args.out, "model_relative_errors.csv")]
    summary.to_csv(outputs[0], index=False)
    errors.to_csv(outputs[1], index=False)
    for fit in (full, sm1, sm2):
        outputs += fit.write(args.out, prefix=f"fit_{fit.label}")
    return config, inputs + [_resolve(args.dataset, "datasets")], outputs


def cmd_plot(args):
    return {"csv": args.csv}, [args.csv], [plot_csv(args.csv, args.output)]


def cmd_synthesize(args):
    model, noise, config, inputs = _setup(args, n_instants=args.instants, total_ns=args.total_ns,
                                          n_trajectories=args.trajectories, base_seed=args.seed)
    states = load_states(_resolve(args.states, "states")) if args.states else pauli_states()
    records = synthesize_dataset(model, noise, states, args.kinds, shots=args.shots, seed=model.run.base_seed)
    path = write_experiment_records(records, os.path.join(args.out, "synthetic_dataset.csv"))
    return config, inputs, [path]


def build_parser():
    parser = argparse.ArgumentParser(prog="transmon-noise", description="Transmon noise learning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (default: TRANSMON_NOISE_WORKERS)")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--run-config", default=os.path.join(DATA_DIR, "run_config.csv"))
    sub = parser.add_subparsers(dest="command", required=True)

    def device_args(p, noise=True):
        p.add_argument("--device", default="quito", help="device name under data/devices or a path")
        if noise:
            p.add_argument("--noise", default=None, help="noise model name or path (default: the device's)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--trajectories", type=int, default=None)

    p = sub.add_parser("fit", help="three-step fit of the six bath parameters")
    device_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="one decay curve")
    device_args(p)
    p.add_argument("--state", type=_state, required=True, help="theta,phi,lambda in degrees")
    p.add_argument("--kind", choices=["free", "dd"], required=True)
    p.add_argument("--instants", type=int, default=None)
    p.add_argument("--total-ns", type=float, default=None)
    p.add_argument("--t1", action="store_true", help="also fit T1 to the curve")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("predict", help="curves and relative errors for a list of states")
    device_args(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--states", default=None, help="state list (default: 6 Pauli + 10 Haar-random)")
    p.add_argument("--kinds", nargs="+", choices=["free", "dd"], default=["free", "dd"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gate", help="envelope spectrum, fidelity and leakage of the X/Y gates")
    device_args(p, noise=False)
    p.add_argument("--tg", type=float, default=70.0)
    p.add_argument("--drag", type=float, default=None, help="DRAG coefficient (default: run config)")
    p.add_argument("--sigma-ratio", type=float, default=None)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("compare-models", help="full model against SM1 and SM2")
    device_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_compare_models)

    p = sub.add_parser("plot", help="render an emitted CSV to SVG")
    p.add_argument("csv")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synthesize", help="synthetic count dataset from a noise model")
    device_args(p)
    p.add_argument("--states", default=None)
    p.add_argument("--kinds", nargs="+", choices=["free", "dd"], default=["free", "dd"])
    p.add_argument("--shots", type=int, default=8192)
    p.add_argument("--instants", type=int, default=None)
    p.add_argument("--total-ns", type=float, default=None)
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    os.makedirs(args.out, exist_ok=True)
    try:
        config, inputs, outputs = args.func(args)
        write_manifest(args.out, args.command, {k: v for k, v in vars(args).items() if k != "func"}, config,
                       seed=config.get("run", {}).get("base_seed"), inputs=inputs, outputs=outputs)
    except TransmonNoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
