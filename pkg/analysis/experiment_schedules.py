import logging
from dataclasses import dataclass

import numpy as np

from analysis.errors import SpecError
from analysis.pulse_control import (
    FrameUpdate,
    GateSpec,
    IdealGate,
    IdleSegment,
    PulseProgram,
    U3Params,
    gate_program,
    half_envelope,
    ideal_gate,
)
from analysis.redfield_engine import run_ensemble_states
from utils.data_loader import ExperimentKind

log = logging.getLogger(__name__)

XY4_AXES = ("X", "Y", "X", "Y")


def pauli_states():
    """|0>, |1>, |+>, |->, |+i>, |-i> as U3 parameters."""
    half = np.pi / 2.0
    return [
        U3Params(0.0, 0.0, 0.0),
        U3Params(np.pi, 0.0, 0.0),
        U3Params(half, 0.0, 0.0),
        U3Params(half, np.pi, 0.0),
        U3Params(half, half, 0.0),
        U3Params(half, -half, 0.0),
    ]


def haar_random_states(n, seed):
    rng = np.random.default_rng(seed)
    theta = np.arccos(1.0 - 2.0 * rng.random(n))
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    lam = rng.uniform(0.0, 2.0 * np.pi, n)
    return [U3Params(float(t), float(p), float(l)) for t, p, l in zip(theta, phi, lam)]


def compile_u3(u3, env):
    """rz(lambda) sx rz(theta+pi) sx rz(phi+3pi), with sx the half-angle pulse of env."""
    sx = gate_program(GateSpec(axis="X", angle=np.pi / 2.0, composition="single"), half_envelope(env, np.pi))
    return (PulseProgram((FrameUpdate(u3.lam),)) + sx + PulseProgram((FrameUpdate(u3.theta + np.pi),)) + sx
            + PulseProgram((FrameUpdate(u3.phi + 3.0 * np.pi),)))


def prepare_state(u3, compiled=False, env=None):
    """Target qubit state and the program that prepares it from |0>.

    The ideal preparation is an empty program: the engine starts in the target state.
    """
    psi = u3.state()
    if not compiled:
        return psi, PulseProgram()
    if env is None:
        raise SpecError("a compiled preparation needs the calibrated pulse envelope")
    return psi, compile_u3(u3, env)


def instants_grid(total, n, cycle=None):
    if n < 2:
        raise SpecError(f"need at least two instants, got {n}")
    if total <= 0:
        raise SpecError(f"total duration must be positive, got {total}")
    spacing = total / n
    instants = np.arange(n) * spacing
    if cycle is not None:
        if cycle > spacing * (1 + 1e-9):
            raise SpecError(f"XY4 cycle of {cycle} ns does not fit the instant spacing of {spacing} ns")
        instants = np.round(instants / cycle) * cycle
    return instants


def _slot(pulse, slot, placement):
    tau = slot - pulse.duration
    if tau < -1e-9:
        raise SpecError(f"pulse of {pulse.duration} ns does not fit an XY4 slot of {slot} ns")
    tau = max(tau, 0.0)
    if placement == "centered":
        return PulseProgram((IdleSegment(tau / 2.0),)) + pulse + PulseProgram((IdleSegment(tau / 2.0),))
    if placement == "edge":
        return pulse + PulseProgram((IdleSegment(tau),))
    raise SpecError(f"unknown pulse placement '{placement}'")


def xy4_cycle(env, cycle_ns, placement="centered", composition="two-halves", ideal=False, frame_angles=()):
    """One X f Y f X f Y f cycle split into four equal slots.

    `frame_angles` are the virtual-Z updates carried by every timed pulse.
    """
    slot = cycle_ns / 4.0
    program = PulseProgram()
    for axis in XY4_AXES:
        if ideal:
            pulse = PulseProgram((IdealGate(ideal_gate(axis, np.pi), axis),))
        else:
            gate = GateSpec(axis=axis, angle=np.pi, composition=composition, virtual_z=tuple(frame_angles))
            pulse = gate_program(gate, env)
        program = program + _slot(pulse, slot, placement)
    return program.merged()


def build_schedule(kind, duration, env=None, cycle_ns=None, placement="centered", composition="two-halves",
                   ideal_pulses=False, frame_angles=()):
    kind = ExperimentKind(kind)
    if duration < 0:
        raise SpecError(f"schedule duration must be non-negative, got {duration}")
    if kind is ExperimentKind.FREE:
        return PulseProgram((IdleSegment(duration),)).merged()

    if cycle_ns is None or cycle_ns <= 0:
        raise SpecError("a DD schedule needs a positive cycle length")
    count = duration / cycle_ns
    cycles = int(round(count))
    if abs(count - cycles) > 1e-6:
        raise SpecError(f"duration {duration} ns is not a whole number of {cycle_ns} ns XY4 cycles")
    return xy4_cycle(env, cycle_ns, placement, composition, ideal_pulses, frame_angles).repeat(cycles).merged()


@dataclass(frozen=True, eq=False)
class ModelSetup:
    """A simulated device: spectrum, run settings and the pulse model (timed or ideal DD)."""

    spectrum: object
    run: object
    ideal_pulses: bool = False
    label: str = "full"
    workers: int = None

    @property
    def envelope(self):
        return None if self.ideal_pulses else self.run.envelope(self.spectrum)

    def grid(self, kind):
        cycle = self.run.cycle_ns if ExperimentKind(kind) is ExperimentKind.DD else None
        return instants_grid(self.run.total_ns, self.run.n_instants, cycle)

    def schedule(self, kind, duration):
        return build_schedule(kind, duration, self.envelope, self.run.cycle_ns, self.run.dd_placement,
                              self.run.gate_composition, self.ideal_pulses, self.frame_angles)

    @property
    def frame_angles(self):
        return () if self.ideal_pulses else self.run.frame_angles(self.spectrum)

    def worker_count(self):
        return self.run.options(workers=self.workers).worker_count()

    def simulate(self, states, kind, noise, n_traj=None, base_seed=None, grid=None):
        return simulate_curves(self, states, kind, noise, grid, n_traj, base_seed)


def simulate_curves(model, states, kind, noise, grid=None, n_traj=None, base_seed=None):
    """One DecayCurve per state; deterministic in (base_seed, state index)."""
    kind = ExperimentKind(kind)
    grid = model.grid(kind) if grid is None else np.asarray(grid, dtype=float)
    n_traj = model.run.n_trajectories if n_traj is None else n_traj
    base_seed = model.run.base_seed if base_seed is None else base_seed
    evolution = model.schedule(kind, float(grid[-1]))
    label = f"{model.label} {kind.value}"
    log.info("simulating %d %s curves (%d instants, %d trajectories)", len(states), kind.value, len(grid),
             n_traj if noise.is_stochastic else 1)

    if model.run.preparation == "ideal" or model.ideal_pulses:
        opts = model.run.options(store_instants=grid, workers=model.workers)
        psis = [u3.state() for u3 in states]
        return run_ensemble_states(model.spectrum, psis, evolution, noise, n_traj, base_seed, opts, label)

    curves = []
    ground = np.array([1.0, 0.0], dtype=complex)
    for u3 in states:
        psi, prep = prepare_state(u3, compiled=True, env=model.envelope)
        opts = model.run.options(store_instants=grid + prep.duration, workers=model.workers)
        curves += run_ensemble_states(model.spectrum, [ground], prep + evolution, noise, n_traj, base_seed, opts,
                                      label, targets=[psi], offset=prep.duration)
    return curves


def simulate_decay_curve(model, u3, kind, noise, grid=None, n_traj=None, base_seed=None):
    return simulate_curves(model, [u3], kind, noise, grid, n_traj, base_seed)[0]
