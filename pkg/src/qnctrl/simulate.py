"""Episode generation: regenerative cycles, fixed horizons, parallel actors.

Actors are embarrassingly parallel: actor ``q`` of iteration ``i`` owns the
Philox stream keyed by ``(master_seed, q, i)`` and results merge by actor
index, so batches are identical for any worker count.  Models built from a
network spec run on the simulation core (compiled when available); tabular
toy chains use the generic single-step path.

FCFS lives here rather than in the policy layer because it needs per-job
arrival-order memory that the Markovian state does not carry.
"""

from __future__ import annotations

import csv
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _core, mdp
from ._core import descriptors
from ._core.fallback import STOP_ARRIVALS, STOP_CYCLES, STOP_STEPS
from .errors import CycleBudgetExceeded
from .mdp import StepMode
from .rng import UniformStream, stream_for

DEFAULT_MAX_STEPS = 10_000_000


@dataclass
class Episode:
    """One actor's trajectory of T transitions.

    ``states`` has T+1 rows (the post-state of the last transition is kept);
    data indices for estimators run over 0..T-1.  ``sigma`` lists the
    post-transition indices at which the regeneration state was visited; in
    steps mode it also includes index 0 when the episode starts there.
    """

    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    fictitious: np.ndarray
    sigma: np.ndarray
    actor: int = 0
    seed_key: tuple = field(default_factory=tuple)

    @property
    def num_steps(self) -> int:
        return int(self.costs.shape[0])

    def state(self, k) -> tuple:
        return tuple(int(v) for v in self.states[k])


@dataclass
class EpisodeBatch:
    episodes: list[Episode]

    def __iter__(self):
        return iter(self.episodes)

    def __len__(self):
        return len(self.episodes)


@dataclass
class GenerationPlan:
    """Per-iteration batch description for :func:`generate_batch`."""

    num_actors: int
    mode: str  # "cycles" or "steps"
    budget: int  # number of cycles, or number of timesteps (N + L)
    step_mode: StepMode = StepMode.EveryTransition
    initial_states: list | None = None
    iteration: int = 0
    max_steps: int = DEFAULT_MAX_STEPS


def _has_descriptor(model) -> bool:
    return getattr(model, "spec", None) is not None


def _run_core(model, policy, x0, stop_kind, stop_n, step_mode, stream, max_steps):
    desc = descriptors.KernelDescriptor(model)
    prov = descriptors.provider_for(policy, model)
    return _core.simulate_episode(
        desc,
        prov,
        [int(v) for v in x0],
        stop_kind,
        int(stop_n),
        step_mode is StepMode.EveryTransition,
        stream,
        int(max_steps),
    )


def _run_generic(model, policy, x0, stop_kind, stop_n, step_mode, stream, max_steps):
    """Single-step reference loop for models without array descriptors."""
    x = tuple(int(v) for v in x0)
    regen = model.regeneration_state
    states = [x]
    actions, costs, fict, sigma = [], [], [], []
    action = None
    prev_fict = False
    arrivals = 0
    done = stop_n <= 0
    while not done and len(costs) < max_steps:
        res = mdp.step(model, policy, x, action, step_mode, stream, prev_fict)
        action = res.action
        actions.append(action)
        costs.append(res.cost)
        fict.append(res.was_fictitious)
        x = res.next_state
        states.append(x)
        prev_fict = res.was_fictitious
        t = len(costs)
        if x == regen:
            sigma.append(t)
        if stop_kind == STOP_STEPS:
            done = t >= stop_n
        elif stop_kind == STOP_CYCLES:
            done = len(sigma) >= stop_n
        else:
            done = arrivals >= stop_n
    return {
        "states": np.array(states, dtype=np.int64),
        "actions": np.array(actions, dtype=np.int64).reshape(len(actions), -1)
        if actions
        else np.zeros((0, model.num_stations), np.int64),
        "costs": np.array(costs, dtype=float),
        "fictitious": np.array(fict, dtype=bool),
        "sigma": np.array(sigma, dtype=np.int64),
        "arrivals": arrivals,
        "completed": bool(done),
    }


def _simulate(model, policy, x0, stop_kind, stop_n, step_mode, stream, max_steps):
    if _has_descriptor(model):
        return _run_core(model, policy, x0, stop_kind, stop_n, step_mode, stream, max_steps)
    return _run_generic(model, policy, x0, stop_kind, stop_n, step_mode, stream, max_steps)


def _to_episode(raw, actor=0, seed_key=()) -> Episode:
    return Episode(
        states=raw["states"],
        actions=raw["actions"],
        costs=raw["costs"],
        fictitious=raw["fictitious"],
        sigma=raw["sigma"],
        actor=actor,
        seed_key=tuple(seed_key),
    )


def run_cycles(model, policy, num_cycles, stream: UniformStream, *,
               step_mode: StepMode = StepMode.EveryTransition,
               max_steps: int = DEFAULT_MAX_STEPS, actor: int = 0) -> Episode:
    """Simulate from the regeneration state until its ``num_cycles``-th return.

    The episode ends one step before that return (the final visit itself is
    only present as the last row of ``states``); ``sigma`` has exactly
    ``num_cycles`` entries.  Raises :class:`CycleBudgetExceeded` when the cap
    is hit first, which signals an unstable policy.
    """
    raw = _simulate(
        model, policy, model.regeneration_state, STOP_CYCLES, num_cycles, step_mode,
        stream, max_steps,
    )
    if not raw["completed"]:
        raise CycleBudgetExceeded(max_steps, int(len(raw["sigma"])))
    return _to_episode(raw, actor=actor)


def run_steps(model, policy, x0, num_steps, stream: UniformStream, *,
              step_mode: StepMode = StepMode.EveryTransition, actor: int = 0) -> Episode:
    """Simulate exactly ``num_steps`` transitions from ``x0``."""
    raw = _simulate(model, policy, x0, STOP_STEPS, num_steps, step_mode, stream,
                    max_steps=max(num_steps, 1))
    sigma = raw["sigma"]
    if tuple(int(v) for v in x0) == model.regeneration_state:
        sigma = np.concatenate([[0], sigma]).astype(np.int64)
    raw["sigma"] = sigma
    return _to_episode(raw, actor=actor)


def run_until_arrivals(model, policy, x0, num_arrivals, stream: UniformStream, *,
                       step_mode: StepMode = StepMode.RealTransitionsOnly,
                       chunk_size: int = 4096, max_steps: int = 2**62) -> dict:
    """Aggregate-only run until ``num_arrivals`` external arrivals are accepted."""
    desc = descriptors.KernelDescriptor(model)
    prov = descriptors.provider_for(policy, model)
    return _core.simulate_aggregate(
        desc, prov, [int(v) for v in x0], STOP_ARRIVALS, int(num_arrivals),
        step_mode is StepMode.EveryTransition, stream, max_steps, chunk_size,
    )


def run_cycles_aggregate(model, policy, num_cycles, stream: UniformStream, *,
                         step_mode: StepMode = StepMode.RealTransitionsOnly,
                         chunk_size: int = 4096, max_steps: int = 2**62) -> dict:
    """Aggregate-only run from the regeneration state for ``num_cycles`` cycles."""
    desc = descriptors.KernelDescriptor(model)
    prov = descriptors.provider_for(policy, model)
    out = _core.simulate_aggregate(
        desc, prov, [int(v) for v in model.regeneration_state], STOP_CYCLES,
        int(num_cycles), step_mode is StepMode.EveryTransition, stream, max_steps,
        chunk_size,
    )
    if not out["completed"]:
        raise CycleBudgetExceeded(max_steps, int(out["cycle_costs"].shape[0]))
    return out


def generate_batch(model, policy, plan: GenerationPlan, master_seed: int, *,
                   workers: int = 1) -> EpisodeBatch:
    """Run ``plan.num_actors`` independent actors and merge by actor index.

    Actor ``q`` uses the stream keyed by ``(master_seed, q, plan.iteration)``
    and, in steps mode, starts from ``plan.initial_states[q]`` (default: the
    regeneration state).  Output is independent of ``workers``.
    """
    stop_kind = STOP_CYCLES if plan.mode == "cycles" else STOP_STEPS

    def one(q: int) -> Episode:
        stream = stream_for(master_seed, actor=q, iteration=plan.iteration)
        if plan.mode == "cycles":
            x0 = model.regeneration_state
        elif plan.initial_states is not None:
            x0 = tuple(int(v) for v in plan.initial_states[q])
        else:
            x0 = model.regeneration_state
        try:
            raw = _simulate(model, policy, x0, stop_kind, plan.budget, plan.step_mode,
                            stream, plan.max_steps)
        except Exception as exc:  # annotate with the failing actor
            raise type(exc)(f"actor {q}: {exc}") from exc
        if stop_kind == STOP_CYCLES and not raw["completed"]:
            raise CycleBudgetExceeded(plan.max_steps, int(len(raw["sigma"]))) from None
        sigma = raw["sigma"]
        if plan.mode == "steps" and tuple(x0) == model.regeneration_state:
            sigma = np.concatenate([[0], sigma]).astype(np.int64)
            raw["sigma"] = sigma
        return _to_episode(raw, actor=q, seed_key=(master_seed, q, plan.iteration))

    if workers <= 1:
        episodes = [one(q) for q in range(plan.num_actors)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(one, range(plan.num_actors)))
    return EpisodeBatch(episodes)


# ---------------------------------------------------------------------------
# FCFS (event-order memory, outside the Markovian policy interface)
# ---------------------------------------------------------------------------


@dataclass
class FcfsResult:
    average: float
    steps: int
    arrivals: int
    chunk_sums: np.ndarray
    chunk_size: int
    total_cost: float


def run_fcfs_eval(spec, num_arrivals, stream: UniformStream, *,
                  chunk_size: int = 4096) -> FcfsResult:
    """First-come-first-serve evaluation by job-level simulation.

    Every job carries its system-arrival step; each station serves the
    head-of-line job with the earliest arrival stamp.  Routing preserves the
    stamp.  Returns the time-average holding cost and batch-means chunks.
    """
    from .mdp import QueueNetworkModel

    model = QueueNetworkModel(spec)
    desc = descriptors.KernelDescriptor(model)
    J = spec.num_classes
    queues = [deque() for _ in range(J)]
    x = [0] * J
    action = [0] * model.num_stations
    flat, offs = desc.station_flat, desc.station_offs
    t = 0
    arrivals = 0
    total_cost = 0.0
    chunk_sums: list[float] = []
    chunk_acc = 0.0
    chunk_fill = 0
    from ._core.fallback import _cost, _transition

    while arrivals < num_arrivals:
        for ell in range(model.num_stations):
            best = -1
            best_stamp = None
            for i in range(offs[ell], offs[ell + 1]):
                j = flat[i]
                if x[j] > 0 and (best_stamp is None or queues[j][0] < best_stamp):
                    best, best_stamp = j, queues[j][0]
            action[ell] = best
        c = _cost(desc, x)
        total_cost += c
        chunk_acc += c
        chunk_fill += 1
        if chunk_fill == chunk_size:
            chunk_sums.append(chunk_acc)
            chunk_acc = 0.0
            chunk_fill = 0
        before = list(x)
        _, arrived = _transition(desc, x, action, stream.next())
        arrivals += arrived
        t += 1
        down = next((j for j in range(J) if x[j] < before[j]), None)
        up = next((k for k in range(J) if x[k] > before[k]), None)
        if arrived:
            queues[up].append(t)  # new job stamped with its arrival step
        elif down is not None:
            stamp = queues[down].popleft()
            if up is not None:
                queues[up].append(stamp)  # routed jobs keep their stamp
    avg = total_cost / t if t else 0.0
    return FcfsResult(avg, t, arrivals, np.array(chunk_sums), chunk_size, total_cost)


def dump_episode(episode: Episode, path):
    """Columnar CSV of one episode (debugging aid)."""
    J = episode.states.shape[1]
    L = episode.actions.shape[1]
    sig = set(int(s) for s in episode.sigma)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["step"]
            + [f"x{j}" for j in range(J)]
            + [f"a{ell}" for ell in range(L)]
            + ["cost", "fictitious", "regen"]
        )
        for k in range(episode.num_steps):
            w.writerow(
                [k]
                + [int(v) for v in episode.states[k]]
                + [int(v) for v in episode.actions[k]]
                + [episode.costs[k], int(episode.fictitious[k]), int(k in sig)]
            )
