"""Uniform interface over controlled Markov chains.

A :class:`ControlModel` exposes feasible actions, the one-step kernel, the
per-step cost, and a distinguished regeneration state.  Actions are tuples
with one entry per station: a 0-based class index or :data:`IDLE`.

Kernels list outcomes in a canonical order with the fictitious self-loop as
the final entry; the samplers below walk that order with a single uniform
draw, so a compiled and an interpreted stepper consuming the same uniform
stream produce bitwise-identical trajectories.

Sampling contract (shared with the simulation cores):

* one uniform per station when sampling an action, except that a station
  whose law is an exact point mass consumes nothing;
* exactly one uniform per transition;
* in ``RealTransitionsOnly`` mode the previous action is reused after a
  fictitious step without consuming action uniforms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import networks
from .networks import IDLE, NetworkSpec, NModelSpec


class StepMode(enum.Enum):
    """When the policy is re-sampled along a uniformized trajectory."""

    EveryTransition = "every"
    RealTransitionsOnly = "real"


class ControlModel:
    """Base class; subclasses define kernel, cost and feasibility."""

    num_classes: int
    num_stations: int
    station_classes: list[list[int]]
    allow_idle: bool
    regeneration_state: tuple[int, ...]
    spec = None

    def feasible_actions(self, state) -> list[list[int]]:
        raise NotImplementedError

    def kernel(self, state, action):
        """Outcome list ``[(next_state, prob), ...]``, self-loop last."""
        raise NotImplementedError

    def cost(self, state) -> float:
        raise NotImplementedError

    def enumerate_actions(self) -> list[tuple[int, ...]]:
        """Every joint action (product of per-station choice sets)."""
        import itertools

        per_station = []
        for ell, classes in enumerate(self.station_classes):
            choices = ([IDLE] if self.allow_idle else []) + list(classes)
            per_station.append(choices)
        return [tuple(a) for a in itertools.product(*per_station)]

    def with_caps(self, caps):
        raise NotImplementedError(f"{type(self).__name__} does not support truncation")


class QueueNetworkModel(ControlModel):
    """Uniformized MQN; optional per-class caps redirect blocked moves to the self-loop."""

    def __init__(self, spec: NetworkSpec, caps=None):
        self.spec = spec
        self.caps = tuple(int(c) for c in caps) if caps is not None else None
        self.num_classes = spec.num_classes
        self.num_stations = spec.num_stations
        self.station_classes = spec.station_classes()
        self.allow_idle = True
        self.regeneration_state = (0,) * spec.num_classes

    def feasible_actions(self, state):
        return networks.action_set(self.spec, state)

    def kernel(self, state, action):
        return networks.transition_distribution(self.spec, state, action, caps=self.caps)

    def cost(self, state):
        return networks.cost(self.spec, state)

    def with_caps(self, caps):
        return QueueNetworkModel(self.spec, caps=caps)


class NModel(ControlModel):
    """Parallel-server N-model; the only real choice is server 2's priority.

    Station choices are ``(0,)`` for server 1 (it always attends class 0) and
    ``(0, 1)`` for server 2 (which class gets priority).  Both choices are
    valid in every state; emptiness is handled by the kernel's indicators.
    """

    def __init__(self, spec: NModelSpec, caps=None):
        self.spec = spec
        self.caps = tuple(int(c) for c in caps) if caps is not None else None
        self.num_classes = 2
        self.num_stations = 2
        self.station_classes = [[0], [0, 1]]
        self.allow_idle = False
        self.regeneration_state = (0, 0)

    def feasible_actions(self, state):
        return [[0], [0, 1]]

    def kernel(self, state, action):
        control = 1 if action[1] == 0 else 2
        return networks.nmodel_transition_distribution(
            self.spec, state, control, caps=self.caps
        )

    def cost(self, state):
        return networks.cost(self.spec, state)

    def with_caps(self, caps):
        return NModel(self.spec, caps=caps)


class TabularModel(ControlModel):
    """Explicit-kernel chain for tests; no control (one dummy station/choice)."""

    def __init__(self, kernel: dict, cost, regeneration_state):
        self._kernel = {}
        for state, entries in kernel.items():
            state = tuple(state)
            entries = [(tuple(y), float(p)) for y, p in entries]
            # normalize to the self-loop-last convention
            if entries and entries[-1][0] == state:
                body, loop = entries[:-1], entries[-1]
            else:
                body = [e for e in entries if e[0] != state]
                loop = (state, sum(p for y, p in entries if y == state))
            self._kernel[state] = body + [loop]
        self._cost = cost if callable(cost) else (lambda x, c=dict(cost): c[tuple(x)])
        self.regeneration_state = tuple(regeneration_state)
        self.num_classes = len(self.regeneration_state)
        self.num_stations = 1
        self.station_classes = [[0]]
        self.allow_idle = False

    def feasible_actions(self, state):
        return [[0]]

    def kernel(self, state, action=None):
        return self._kernel[tuple(state)]

    def cost(self, state):
        return float(self._cost(state))

    def with_caps(self, caps):
        for state, entries in self._kernel.items():
            for y, _ in [(state, None)] + entries:
                if any(v > c for v, c in zip(y, caps)):
                    raise ValueError("tabular chain does not fit inside the box")
        return self


def make_model(spec, caps=None) -> ControlModel:
    if isinstance(spec, NModelSpec):
        return NModel(spec, caps=caps)
    return QueueNetworkModel(spec, caps=caps)


def is_regeneration(model: ControlModel, state) -> bool:
    return tuple(state) == model.regeneration_state


# ---------------------------------------------------------------------------
# Canonical samplers
# ---------------------------------------------------------------------------


def sample_station_choice(probs, choices, u):
    """Inverse-CDF walk over one station's law; final slot takes the remainder."""
    cum = 0.0
    for i in range(len(choices) - 1):
        cum += probs[i]
        if u < cum:
            return choices[i]
    return choices[-1]


def sample_action_from_law(law, stream):
    """Draw one choice per station; point-mass stations consume no uniforms."""
    action = []
    for probs, choices in law:
        hit = None
        for i, p in enumerate(probs):
            if p == 1.0:
                hit = choices[i]
                break
        if hit is None:
            hit = sample_station_choice(probs, choices, stream.next())
        action.append(hit)
    return tuple(action)


def sample_transition(entries, u):
    """Walk a kernel outcome list with one uniform; returns (state, is_last)."""
    cum = 0.0
    for i in range(len(entries) - 1):
        cum += entries[i][1]
        if u < cum:
            return entries[i][0], False
    return entries[-1][0], True


def policy_kernel(model, policy, state):
    """One-step distribution under a policy, merged over states.

    Exploits the per-station factorization: arrival mass is action free, and
    a class completes at rate ``u_j mu_j`` where ``u_j`` is the law's mass on
    serving it, so no joint-action enumeration is needed.
    """
    law = policy.action_law(model, state)
    merged: dict[tuple, float] = {}
    x = tuple(int(v) for v in state)

    def add(y, p):
        if p > 0:
            merged[y] = merged.get(y, 0.0) + p

    if isinstance(model, TabularModel):
        return model.kernel(x, None)

    station_laws = law.station_laws()
    if isinstance(model, NModel):
        probs, choices = station_laws[1]
        out: dict[tuple, float] = {}
        for p_choice, choice in zip(probs, choices):
            if p_choice <= 0:
                continue
            for y, p in model.kernel(x, (0, choice)):
                out[y] = out.get(y, 0.0) + p_choice * p
        entries = [(y, p) for y, p in out.items() if y != x]
        entries.append((x, out.get(x, 0.0)))
        return entries

    spec = model.spec
    B = spec.uniformization_rate
    caps = model.caps
    used = 0.0

    def push_move(y, p):
        nonlocal used
        if caps is not None and any(y[j] > caps[j] for j in range(len(y))):
            return  # blocked mass stays on the self-loop
        used += p
        add(y, p)

    for j in range(model.num_classes):
        if spec.arrival_rate[j] > 0:
            y = list(x)
            y[j] += 1
            push_move(tuple(y), spec.arrival_rate[j] / B)
    for (probs, choices) in station_laws:
        for p_choice, choice in zip(probs, choices):
            if choice == IDLE or p_choice <= 0 or x[choice] < 1:
                continue
            mu = spec.service_rate[choice]
            row = spec.routing[choice]
            depart = 1.0 - sum(row)
            for k in range(model.num_classes):
                if row[k] > 0:
                    y = list(x)
                    y[choice] -= 1
                    y[k] += 1
                    push_move(tuple(y), p_choice * mu * row[k] / B)
            if depart > 1e-15:
                y = list(x)
                y[choice] -= 1
                push_move(tuple(y), p_choice * mu * depart / B)
    entries = [(y, p) for y, p in merged.items() if y != x]
    entries.append((x, merged.get(x, 0.0) + (1.0 - used)))
    return entries


@dataclass
class StepResult:
    action: tuple[int, ...]
    next_state: tuple[int, ...]
    cost: float
    was_fictitious: bool


def step(model, policy, state, last_action, mode: StepMode, stream,
         last_was_fictitious: bool = False) -> StepResult:
    """One uniformized transition under a policy.

    In ``RealTransitionsOnly`` mode the action is carried over whenever the
    previous transition was fictitious, matching the evaluation semantics in
    which server priorities persist until a real event occurs.
    """
    state = tuple(state)
    if mode is StepMode.RealTransitionsOnly and last_was_fictitious and last_action is not None:
        action = tuple(last_action)
    else:
        law = policy.action_law(model, state)
        action = sample_action_from_law(law.station_laws(), stream)
    c = model.cost(state)
    entries = model.kernel(state, action)
    next_state, is_loop = sample_transition(entries, stream.next())
    return StepResult(action, next_state, c, is_loop)
