"""Flat array descriptions of kernels and policies for the simulation cores.

Both the compiled and the fallback stepper read only these structures, never
the model or policy objects, so the canonical outcome ordering (arrivals by
ascending class, completions by ascending station with routing targets
ascending and departure last, self-loop as the remainder) is encoded exactly
once, here.
"""

from __future__ import annotations

import numpy as np

from ..networks import IDLE, NetworkSpec, NModelSpec

KIND_MQN = 0
KIND_NMODEL = 1

PROVIDER_CACHED = 0
PROVIDER_PR = 1
PROVIDER_STATIC = 2
PROVIDER_THRESHOLD = 3
PROVIDER_UNIFORM = 4

_NO_CAP = np.iinfo(np.int64).max // 4


class KernelDescriptor:
    """Arrays driving the per-step transition walk."""

    def __init__(self, model):
        spec = model.spec
        self.kind = KIND_NMODEL if isinstance(spec, NModelSpec) else KIND_MQN
        self.num_classes = model.num_classes
        self.num_stations = model.num_stations
        self.allow_idle = model.allow_idle
        self.regen = np.array(model.regeneration_state, dtype=np.int64)
        caps = getattr(model, "caps", None)
        self.caps = (
            np.array(caps, dtype=np.int64)
            if caps is not None
            else np.full(self.num_classes, _NO_CAP, dtype=np.int64)
        )
        self.holding = np.array(spec.holding_cost, dtype=float)
        self.quadratic = spec.cost_form == "quadratic"
        # station layout shared by law sampling: classes ascending, idle last
        flat, offs = [], [0]
        for classes in model.station_classes:
            flat.extend(classes)
            offs.append(len(flat))
        self.station_flat = np.array(flat, dtype=np.int64)
        self.station_offs = np.array(offs, dtype=np.int64)
        slot_offs = [0]
        for ell in range(self.num_stations):
            width = offs[ell + 1] - offs[ell] + (1 if self.allow_idle else 0)
            slot_offs.append(slot_offs[-1] + width)
        self.slot_offs = np.array(slot_offs, dtype=np.int64)
        self.law_width = int(slot_offs[-1])

        if self.kind == KIND_MQN:
            self._build_mqn(spec)
        else:
            self._build_nmodel(spec)

    def _build_mqn(self, spec: NetworkSpec):
        B = spec.uniformization_rate
        J = spec.num_classes
        arr = [(j, spec.arrival_rate[j] / B) for j in range(J) if spec.arrival_rate[j] > 0]
        self.arr_class = np.array([j for j, _ in arr], dtype=np.int64)
        self.arr_prob = np.array([p for _, p in arr], dtype=float)
        targets, probs, offs = [], [], [0]
        for j in range(J):
            mu = spec.service_rate[j]
            row = spec.routing[j]
            for k in range(J):
                if row[k] > 0:
                    targets.append(k)
                    probs.append(mu * row[k] / B)
            depart = 1.0 - sum(row)
            if depart > 1e-15:
                targets.append(-1)
                probs.append(mu * depart / B)
            offs.append(len(targets))
        self.svc_target = np.array(targets, dtype=np.int64)
        self.svc_prob = np.array(probs, dtype=float)
        self.svc_offs = np.array(offs, dtype=np.int64)

    def _build_nmodel(self, spec: NModelSpec):
        B = spec.uniformization_rate
        self.nm_lam = np.array(spec.arrival_rate, dtype=float) / B
        self.nm_mu = np.array(spec.activity_rate, dtype=float) / B


class PolicyProvider:
    """How the stepper obtains per-station choices at a state."""

    def __init__(self, code, *, rank_of=None, threshold=0, law_fn=None):
        self.code = code
        self.rank_of = (
            np.array(rank_of, dtype=np.int64) if rank_of is not None else np.zeros(0, np.int64)
        )
        self.threshold = int(threshold)
        self.law_fn = law_fn
        self.cache: dict = {}


def flat_law(model, law) -> np.ndarray:
    """Pack an ActionLaw into the slot layout used by the cores."""
    rows = []
    for probs, _choices in law.station_laws():
        rows.append(np.asarray(probs, dtype=float))
    return np.concatenate(rows)


def provider_for(policy, model) -> PolicyProvider:
    """Pick the fast in-core rule when one applies, else the cached-law path."""
    from .. import policies as P
    from ..mdp import NModel, QueueNetworkModel

    is_mqn = isinstance(model, QueueNetworkModel)
    if isinstance(policy, P.ProportionallyRandomized) and is_mqn:
        return PolicyProvider(PROVIDER_PR)
    if isinstance(policy, P.StaticPriority) and is_mqn:
        rank_of = np.zeros(model.num_classes, dtype=np.int64)
        for pos, j in enumerate(policy.ranking):
            rank_of[j] = pos
        return PolicyProvider(PROVIDER_STATIC, rank_of=rank_of)
    if isinstance(policy, P.Threshold) and isinstance(model, NModel):
        return PolicyProvider(PROVIDER_THRESHOLD, threshold=policy.threshold)
    if isinstance(policy, P.UniformRandom) and is_mqn:
        return PolicyProvider(PROVIDER_UNIFORM)

    def law_fn(state_tuple):
        law = policy.action_law(model, np.array(state_tuple, dtype=np.int64))
        return flat_law(model, law)

    return PolicyProvider(PROVIDER_CACHED, law_fn=law_fn)
