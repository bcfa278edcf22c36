"""Randomized stationary Markov policies over queueing-network models.

An :class:`ActionLaw` holds one categorical distribution per station over
that station's servable classes plus, for networks that allow idling, an
explicit idle slot (always the last slot, taking any leftover mass during
sampling).

The neural policy emits one logit per class plus one idle logit per station;
each station's group is normalized with a softmax.  Softmax mass assigned to
an empty buffer is folded onto the idle slot before sampling.  Under the
uniformized kernel, serving an empty buffer and idling are the same event, so
folding leaves the induced chain unchanged while keeping log-probabilities
consistent with what the kernel actually does; probability ratios in PPO use
the folded law for both the new and the old parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .errors import InsufficientData, ZeroProbabilityAction
from .networks import IDLE

_LAW_TOL = 1e-9


class ActionLaw:
    """Per-station categorical laws; ``choices`` aligns with ``probs``."""

    def __init__(self, laws):
        self._laws = [(np.asarray(p, dtype=float), tuple(c)) for p, c in laws]
        for probs, choices in self._laws:
            if abs(probs.sum() - 1.0) > _LAW_TOL:
                raise ValueError(f"station law sums to {probs.sum()!r}")
            if len(probs) != len(choices):
                raise ValueError("probs/choices length mismatch")

    def station_laws(self):
        return self._laws

    def prob_of(self, action) -> float:
        p = 1.0
        for (probs, choices), a in zip(self._laws, action):
            p *= probs[choices.index(a)]
        return float(p)

    def log_prob_of(self, action) -> float:
        total = 0.0
        for (probs, choices), a in zip(self._laws, action):
            pa = probs[choices.index(a)]
            if pa <= 0.0:
                raise ZeroProbabilityAction(f"action {action} has zero probability")
            total += np.log(pa)
        return float(total)


def _station_choices(model, ell):
    classes = model.station_classes[ell]
    return tuple(classes) + ((IDLE,) if model.allow_idle else ())


class Policy:
    """Base policy; subclasses compute the action law at a state."""

    def action_law(self, model, state) -> ActionLaw:
        raise NotImplementedError


class ProportionallyRandomized(Policy):
    """Nonempty class j is prioritized with probability x_j over the station total.

    Maximally stable for open multiclass networks; the station idles only
    when all of its buffers are empty.
    """

    def action_law(self, model, state):
        x = np.asarray(state)
        laws = []
        for ell in range(model.num_stations):
            choices = _station_choices(model, ell)
            classes = model.station_classes[ell]
            total = sum(int(x[j]) for j in classes)
            probs = np.zeros(len(choices))
            if total > 0:
                for i, j in enumerate(classes):
                    probs[i] = x[j] / total
            elif model.allow_idle:
                probs[-1] = 1.0
            else:
                probs[0] = 1.0
            laws.append((probs, choices))
        return ActionLaw(laws)


class StaticPriority(Policy):
    """Deterministic priority policy; earlier entries of ``ranking`` win."""

    def __init__(self, ranking):
        self.ranking = tuple(ranking)
        if sorted(self.ranking) != list(range(len(self.ranking))):
            raise ValueError("ranking must be a permutation of the classes")

    def action_law(self, model, state):
        x = np.asarray(state)
        rank = {j: i for i, j in enumerate(self.ranking)}
        laws = []
        for ell in range(model.num_stations):
            choices = _station_choices(model, ell)
            nonempty = [j for j in model.station_classes[ell] if x[j] >= 1]
            probs = np.zeros(len(choices))
            if nonempty:
                best = min(nonempty, key=lambda j: rank[j])
                probs[choices.index(best)] = 1.0
            elif model.allow_idle:
                probs[-1] = 1.0
            else:
                probs[0] = 1.0
            laws.append((probs, choices))
        return ActionLaw(laws)


def lbfs(num_classes: int) -> StaticPriority:
    """Last-buffer-first-serve: priority to the highest class index."""
    return StaticPriority(tuple(range(num_classes - 1, -1, -1)))


class Threshold(Policy):
    """N-model rule: server 2 prioritizes class 1 when its backlog exceeds T."""

    def __init__(self, threshold: int):
        if threshold < 0:
            raise ValueError("threshold must be nonnegative")
        self.threshold = int(threshold)

    def action_law(self, model, state):
        x = np.asarray(state)
        first = (np.array([1.0]), (0,))
        if x[0] > self.threshold:
            second = (np.array([1.0, 0.0]), (0, 1))
        else:
            second = (np.array([0.0, 1.0]), (0, 1))
        return ActionLaw([first, second])


class UniformRandom(Policy):
    """Uniform over the feasible choices of each station."""

    def action_law(self, model, state):
        feas = model.feasible_actions(state)
        laws = []
        for ell in range(model.num_stations):
            choices = _station_choices(model, ell)
            allowed = feas[ell]
            probs = np.zeros(len(choices))
            for a in allowed:
                probs[choices.index(a)] = 1.0 / len(allowed)
            laws.append((probs, choices))
        return ActionLaw(laws)


# ---------------------------------------------------------------------------
# Neural policy
# ---------------------------------------------------------------------------


def station_groups(model):
    """Logit indices per station: (class logit list, idle logit index or None).

    The policy head is laid out as J class logits followed by L idle logits.
    """
    J = model.num_classes
    groups = []
    for ell in range(model.num_stations):
        idle = J + ell if model.allow_idle else None
        groups.append((list(model.station_classes[ell]), idle))
    return groups


def station_softmax(model, logits_batch, states_batch):
    """Folded per-station softmax for a batch.

    Returns ``(folded, raw)``: two lists with one (n, slots) array per
    station, slots ordered like the station's choices (idle last when
    allowed).  ``raw`` is the plain softmax over the group; ``folded`` moves
    the mass of empty buffers onto the idle slot.
    """
    logits = np.atleast_2d(np.asarray(logits_batch, dtype=float))
    x = np.atleast_2d(np.asarray(states_batch))
    folded_all, raw_all = [], []
    for classes, idle in station_groups(model):
        cols = classes + ([idle] if idle is not None else [])
        group = logits[:, cols]
        group = group - group.max(axis=1, keepdims=True)
        expg = np.exp(group)
        raw = expg / expg.sum(axis=1, keepdims=True)
        folded = raw.copy()
        if idle is not None:
            empty = x[:, classes] < 1
            moved = np.where(empty, folded[:, : len(classes)], 0.0)
            folded[:, : len(classes)] = np.where(empty, 0.0, folded[:, : len(classes)])
            folded[:, -1] += moved.sum(axis=1)
        raw_all.append(raw)
        folded_all.append(folded)
    return folded_all, raw_all


class NeuralPolicy(Policy):
    """Softmax policy over the outputs of a small feed-forward network."""

    def __init__(self, params: nn.MlpParams):
        self.params = params

    def action_law(self, model, state):
        logits = nn.forward(self.params, np.asarray(state, dtype=float))
        folded, _ = station_softmax(model, logits[None, :], np.asarray(state)[None, :])
        laws = []
        for ell in range(model.num_stations):
            choices = _station_choices(model, ell)
            laws.append((folded[ell][0], choices))
        return ActionLaw(laws)


def action_law(policy: Policy, model, state) -> ActionLaw:
    """Module-level convenience wrapper."""
    return policy.action_law(model, state)


def sample_action(law: ActionLaw, stream):
    from .mdp import sample_action_from_law

    return sample_action_from_law(law.station_laws(), stream)


def log_prob(policy: Policy, model, state, action) -> float:
    return policy.action_law(model, state).log_prob_of(action)


# ---------------------------------------------------------------------------
# Batched log-probabilities and gradients (used by PPO and cloning)
# ---------------------------------------------------------------------------


def batch_log_probs(model, params, states, actions):
    """Log pi(a|x) for aligned state/action arrays under the folded law."""
    logits = nn.forward(params, np.asarray(states, dtype=float))
    folded, _ = station_softmax(model, logits, states)
    n = logits.shape[0]
    out = np.zeros(n)
    for ell in range(model.num_stations):
        choices = _station_choices(model, ell)
        idx = np.array([choices.index(a) for a in np.asarray(actions)[:, ell]])
        p = folded[ell][np.arange(n), idx]
        if np.any(p <= 0.0):
            raise ZeroProbabilityAction("zero-probability action in batch")
        out += np.log(p)
    return out


def logit_grad_log_prob(model, raw, folded, states, actions):
    """d log pi(a|x) / d logits for a batch, shaped (n, J + L).

    For a chosen class the gradient is the usual softmax one-hot difference;
    for a chosen idle slot the folded mass (idle plus empty classes) acts as
    a single merged category.
    """
    x = np.atleast_2d(np.asarray(states))
    acts = np.atleast_2d(np.asarray(actions))
    n = x.shape[0]
    width = model.num_classes + (model.num_stations if model.allow_idle else 0)
    grad = np.zeros((n, width))
    for ell, (classes, idle) in enumerate(station_groups(model)):
        cols = classes + ([idle] if idle is not None else [])
        sigma = raw[ell]
        target = np.zeros_like(sigma)
        chosen = acts[:, ell]
        if idle is not None:
            empty = x[:, classes] < 1
            merged = np.concatenate([empty, np.ones((n, 1), bool)], axis=1)
            p_merged = np.where(merged, sigma, 0.0).sum(axis=1)
            is_idle = chosen == IDLE
            # idle picks the merged category, distributed proportionally to sigma
            target[is_idle] = (
                np.where(merged[is_idle], sigma[is_idle], 0.0)
                / p_merged[is_idle, None]
            )
        else:
            is_idle = np.zeros(n, bool)
        for i, j in enumerate(classes):
            pick = (~is_idle) & (chosen == j)
            target[pick, i] = 1.0
        grad[:, cols] += target - sigma
    return grad


def logit_grad_cross_entropy(model, raw, states, target_laws):
    """d CE(target, folded softmax) / d logits, summed over stations.

    ``target_laws``: per station (n, slots) arrays matching the choice
    layout.  Idle-slot target mass distributes over the merged category
    proportionally to the raw softmax.
    """
    x = np.atleast_2d(np.asarray(states))
    n = x.shape[0]
    width = model.num_classes + (model.num_stations if model.allow_idle else 0)
    grad = np.zeros((n, width))
    for ell, (classes, idle) in enumerate(station_groups(model)):
        cols = classes + ([idle] if idle is not None else [])
        sigma = raw[ell]
        t = np.asarray(target_laws[ell], dtype=float)
        tilde = t.copy()
        if idle is not None:
            empty = x[:, classes] < 1
            merged = np.concatenate([empty, np.ones((n, 1), bool)], axis=1)
            p_merged = np.where(merged, sigma, 0.0).sum(axis=1)
            t_idle = t[:, -1] + np.where(empty, t[:, :-1], 0.0).sum(axis=1)
            tilde = np.where(merged, sigma * (t_idle / p_merged)[:, None], t)
            tilde[:, -1] = sigma[:, -1] * t_idle / p_merged
        grad[:, cols] += sigma - tilde
    return grad


# ---------------------------------------------------------------------------
# Batched laws over whole state arrays (exact solvers, cloning targets)
# ---------------------------------------------------------------------------


def batch_action_laws(model, policy, states) -> list[np.ndarray]:
    """Laws for every row of ``states``: one (n, slots) array per station.

    Vectorized per policy family; anything unknown falls back to the
    per-state path.
    """
    x = np.atleast_2d(np.asarray(states))
    n = x.shape[0]
    out = []
    if hasattr(policy, "batch_action_laws"):
        return policy.batch_action_laws(model, x)
    if isinstance(policy, NeuralPolicy):
        logits = nn.forward(policy.params, x.astype(float))
        folded, _ = station_softmax(model, logits, x)
        return folded
    if isinstance(policy, ProportionallyRandomized):
        for classes in model.station_classes:
            slots = len(classes) + (1 if model.allow_idle else 0)
            law = np.zeros((n, slots))
            counts = x[:, classes].astype(float)
            total = counts.sum(axis=1)
            busy = total > 0
            law[busy, : len(classes)] = counts[busy] / total[busy, None]
            if model.allow_idle:
                law[~busy, -1] = 1.0
            else:
                law[~busy, 0] = 1.0
            out.append(law)
        return out
    if isinstance(policy, StaticPriority):
        rank = {j: i for i, j in enumerate(policy.ranking)}
        for classes in model.station_classes:
            slots = len(classes) + (1 if model.allow_idle else 0)
            law = np.zeros((n, slots))
            ranks = np.array([rank[j] for j in classes], dtype=float)
            masked = np.where(x[:, classes] >= 1, ranks[None, :], np.inf)
            best = masked.argmin(axis=1)
            any_busy = np.isfinite(masked.min(axis=1))
            law[np.nonzero(any_busy)[0], best[any_busy]] = 1.0
            if model.allow_idle:
                law[~any_busy, -1] = 1.0
            else:
                law[~any_busy, 0] = 1.0
            out.append(law)
        return out
    if isinstance(policy, Threshold):
        first = np.zeros((n, 1))
        first[:, 0] = 1.0
        second = np.zeros((n, 2))
        high = x[:, 0] > policy.threshold
        second[high, 0] = 1.0
        second[~high, 1] = 1.0
        return [first, second]
    if isinstance(policy, UniformRandom):
        for classes in model.station_classes:
            slots = len(classes) + (1 if model.allow_idle else 0)
            law = np.zeros((n, slots))
            nonempty = (x[:, classes] >= 1).astype(float)
            count = nonempty.sum(axis=1) + (1.0 if model.allow_idle else 0.0)
            count = np.maximum(count, 1.0)
            law[:, : len(classes)] = nonempty / count[:, None]
            if model.allow_idle:
                law[:, -1] = 1.0 / count
            else:
                empty = nonempty.sum(axis=1) == 0
                law[empty, 0] = 1.0
            out.append(law)
        return out
    # generic per-state fallback
    per_station = [np.zeros((n, len(c) + (1 if model.allow_idle else 0)))
                   for c in model.station_classes]
    for i in range(n):
        law = policy.action_law(model, x[i])
        for ell, (probs, _) in enumerate(law.station_laws()):
            per_station[ell][i] = probs
    return per_station


# ---------------------------------------------------------------------------
# Behavior cloning
# ---------------------------------------------------------------------------


def teacher_laws_at(model, teacher: Policy, states):
    """Teacher laws stacked per station for a list of states."""
    per_station = [[] for _ in range(model.num_stations)]
    for x in states:
        law = teacher.action_law(model, x)
        for ell, (probs, _) in enumerate(law.station_laws()):
            per_station[ell].append(probs)
    return [np.array(rows) for rows in per_station]


def kl_teacher_student(model, params, states, target_laws) -> float:
    """Mean KL(teacher || student) over states, summed across stations."""
    logits = nn.forward(params, np.asarray(states, dtype=float))
    folded, _ = station_softmax(model, logits, states)
    n = logits.shape[0]
    kl = np.zeros(n)
    for ell in range(model.num_stations):
        t = np.asarray(target_laws[ell])
        s = np.clip(folded[ell], 1e-12, None)
        mask = t > 0
        kl += np.where(mask, t * (np.log(np.where(mask, t, 1.0)) - np.log(s)), 0.0).sum(
            axis=1
        )
    return float(kl.mean())


def clone_from_teacher(model, teacher: Policy, states, target_laws=None, *,
                       learning_rate=5e-4, minibatch=2048, max_epochs=200,
                       kl_target=0.05, holdout_fraction=0.1, seed=0):
    """Fit the policy net to a teacher's laws by cross-entropy on visited states.

    Stops once the held-out mean KL(teacher || student) falls below
    ``kl_target``.  Returns ``(params, final_kl)``.
    """
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] == 0:
        raise InsufficientData("cloning needs a nonempty set of visited states")
    if target_laws is None:
        target_laws = teacher_laws_at(model, teacher, states)
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0xC10E))))
    n = states.shape[0]
    perm = gen.permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n))) if n > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    if train.size == 0:
        raise InsufficientData("dataset too small for a train/holdout split")
    arch = nn.MlpArchitecture.policy(model.num_classes, model.num_stations)
    params = nn.xavier_init(arch, gen)
    adam = nn.AdamState(params)
    eval_idx = hold if hold.size else train
    hold_targets = [t[eval_idx] for t in target_laws]
    final_kl = np.inf
    for _ in range(max_epochs):
        order = gen.permutation(train.size)
        for start in range(0, train.size, minibatch):
            rows = train[order[start : start + minibatch]]
            xb = states[rows].astype(float)
            out, cache = nn.forward_with_cache(params, xb)
            _, raw = station_softmax(model, out, states[rows])
            tb = [t[rows] for t in target_laws]
            gout = logit_grad_cross_entropy(model, raw, states[rows], tb) / len(rows)
            grads = nn.backward(params, xb, gout, cache=cache)
            nn.adam_step(params, adam, grads, learning_rate)
        final_kl = kl_teacher_student(model, params, states[eval_idx], hold_targets)
        if final_kl < kl_target:
            break
    return params, final_kl


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: nn.MlpParams, *, spec_fingerprint: str = "",
                    extra: dict | None = None):
    """Self-describing JSON checkpoint for a policy or value network."""
    payload = {
        "layer_sizes": list(params.architecture.layer_sizes),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "spec_fingerprint": spec_fingerprint,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path) -> tuple[nn.MlpParams, dict]:
    data = json.loads(Path(path).read_text())
    arch = nn.MlpArchitecture(tuple(data["layer_sizes"]))
    params = nn.MlpParams(arch, data["weights"], data["biases"])
    return params, data
