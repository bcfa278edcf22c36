"""Value and advantage estimators over regenerative episodes.

The family is built from one template: a per-step residual
``delta_t = g(x_t) - center + weight * E[zeta(next)] - zeta(x_t)`` summed with
a ``(gamma * lam)`` decay from step k up to a truncation point, plus
``zeta(x_k)``.  Choosing the center (average cost or present discounted
value), the expectation (exact kernel average, one-replication next value, or
zero) and the truncation (next regeneration, episode end, or both) yields the
standard regenerative estimator, its martingale-corrected variant, the
discounted regenerative and infinite-horizon forms, and the one-replication
TD(lambda) form.

Per-step reference implementations follow the definitions literally; the
``batch_targets`` path computes all steps of an episode with one backward
recursion and is tested against the references.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mdp, nn
from .errors import (
    InfeasibleAction,
    NoCompleteCycle,
    NoRegenerationAfter,
    RegenerationNeverVisited,
)


@dataclass(frozen=True)
class EstimatorConfig:
    """Discount, TD parameter, tail length and variant selection."""

    gamma: float = 1.0
    lam: float = 1.0
    tail: int = 0
    variant: str = "amp"  # "standard" | "amp" | "gae"
    value_target: str = "regenerative"  # or "infinite"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.lam <= 1.0:
            raise ValueError("gamma and lam must lie in (0, 1]")
        if self.tail < 0:
            raise ValueError("tail must be nonnegative")


@dataclass
class ValueTargets:
    """Per-step regression targets plus the batch centering scalars."""

    per_episode: list[np.ndarray]
    avg_cost: float
    r_star: float | None = None


def default_tail(gamma: float, floor: float = 1e-4) -> int:
    """Smallest L with gamma**L below ``floor``."""
    if gamma >= 1.0:
        raise ValueError("tail length is only defined for gamma < 1")
    return int(np.ceil(np.log(floor) / np.log(gamma)))


# ---------------------------------------------------------------------------
# Centers
# ---------------------------------------------------------------------------


def avg_cost(batch) -> float:
    """Long-run average cost pooled over the batch.

    Cycles-mode episodes are exactly a whole number of regenerative cycles,
    so the pooled ratio of cost to length is the regenerative estimator; for
    fixed-horizon episodes it is the plain time average.
    """
    total_cost = 0.0
    total_len = 0
    for ep in batch:
        if ep.num_steps == 0:
            raise NoCompleteCycle(f"actor {ep.actor}: empty episode")
        total_cost += float(ep.costs.sum())
        total_len += ep.num_steps
    if total_len == 0:
        raise NoCompleteCycle("batch has no data")
    return total_cost / total_len


def r_star(batch, gamma: float, tail: int | None = None) -> float:
    """Present discounted value at the regeneration state, from all visits.

    Averages ``(1 - gamma) * sum_{k=v}^{v+L} gamma^(k-v) g(x_k)`` over every
    visit v in ``episode.sigma`` across the batch, truncating each inner sum
    at the episode end.
    """
    if tail is None:
        tail = default_tail(gamma)
    num = 0.0
    visits = 0
    for ep in batch:
        hits = [int(v) for v in ep.sigma]
        if not hits:
            continue
        T = ep.num_steps
        for v in hits:
            hi = min(v + tail, T - 1)
            if hi >= v:
                w = gamma ** np.arange(0, hi - v + 1)
                num += float(w @ ep.costs[v : hi + 1])
            visits += 1
    if visits == 0:
        raise RegenerationNeverVisited("no visit to the regeneration state in the batch")
    return (1.0 - gamma) * num / visits


# ---------------------------------------------------------------------------
# Per-step reference estimators
# ---------------------------------------------------------------------------


def _sigma_after(episode, k: int):
    idx = np.searchsorted(episode.sigma, k, side="right")
    if idx >= episode.sigma.size:
        return None
    return int(episode.sigma[idx])


def h_standard(episode, k: int, avg: float) -> float:
    """One-replication regenerative estimate of the relative value at step k."""
    sk = _sigma_after(episode, k)
    if sk is None:
        raise NoRegenerationAfter(k)
    return float(np.sum(episode.costs[k:sk] - avg))


def h_amp(episode, k: int, avg: float, zeta, kernel_expectation) -> float:
    """Martingale-corrected regenerative estimate; zero variance at the exact solution."""
    sk = _sigma_after(episode, k)
    if sk is None:
        raise NoRegenerationAfter(k)
    total = float(zeta(episode.state(k)))
    for t in range(k, sk):
        x = episode.state(t)
        total += episode.costs[t] - avg + kernel_expectation(x) - zeta(x)
    return total


def v_amp(episode, k: int, cfg: EstimatorConfig, r_hat: float, zeta,
          kernel_expectation) -> float:
    """Discounted regenerative AMP estimator, truncated at min(sigma_k, episode end)."""
    sk = _sigma_after(episode, k)
    bound = episode.num_steps if sk is None else min(sk, episode.num_steps)
    total = float(zeta(episode.state(k)))
    w = 1.0
    for t in range(k, bound):
        x = episode.state(t)
        total += w * (
            episode.costs[t] - r_hat + cfg.gamma * kernel_expectation(x) - zeta(x)
        )
        w *= cfg.gamma * cfg.lam
    return total


def v_gae(episode, k: int, cfg: EstimatorConfig, r_hat: float, zeta) -> float:
    """One-replication variant of :func:`v_amp`: next value sampled, not averaged."""
    sk = _sigma_after(episode, k)
    bound = episode.num_steps if sk is None else min(sk, episode.num_steps)
    total = float(zeta(episode.state(k)))
    w = 1.0
    for t in range(k, bound):
        total += w * (
            episode.costs[t]
            - r_hat
            + cfg.gamma * zeta(episode.state(t + 1))
            - zeta(episode.state(t))
        )
        w *= cfg.gamma * cfg.lam
    return total


def v_infinite(episode, k: int, cfg: EstimatorConfig, avg: float, zeta,
               kernel_expectation) -> float:
    """Infinite-horizon discounted AMP estimator; sums to the episode end."""
    total = float(zeta(episode.state(k)))
    w = 1.0
    for t in range(k, episode.num_steps):
        x = episode.state(t)
        total += w * (episode.costs[t] - avg + cfg.gamma * kernel_expectation(x) - zeta(x))
        w *= cfg.gamma * cfg.lam
    return total


def advantage(model, value_fn, state, action, center: float, gamma: float = 1.0) -> float:
    """Exact-expectation advantage of one state/action pair.

    ``g(x) - center + gamma * sum_y P(y|x,a) V(y) - V(x)`` with the
    expectation enumerated over the kernel support.  The discounted variant
    (gamma < 1, center = present discounted value) matches the discounted
    Poisson equation, so exact inputs give identically zero mean advantage
    under the behavior policy.
    """
    x = tuple(int(v) for v in state)
    entries = model.kernel(x, action)
    ev = sum(p * float(value_fn(y)) for y, p in entries)
    return model.cost(x) - center + gamma * ev - float(value_fn(x))


def mean_advantage_under_policy(model, policy, value_fn, state, center: float,
                                gamma: float = 1.0) -> float:
    """Policy-averaged advantage; vanishes at the exact solution."""
    x = tuple(int(v) for v in state)
    entries = mdp.policy_kernel(model, policy, x)
    ev = sum(p * float(value_fn(y)) for y, p in entries)
    return model.cost(x) - center + gamma * ev - float(value_fn(x))


def make_kernel_expectation(model, policy, zeta):
    """Exact ``x -> E[zeta(next) | x]`` under the behavior policy."""

    def pz(state):
        entries = mdp.policy_kernel(model, policy, tuple(int(v) for v in state))
        return sum(p * float(zeta(y)) for y, p in entries)

    return pz


# ---------------------------------------------------------------------------
# Batched computation (training path)
# ---------------------------------------------------------------------------


def _unique_rows(arr):
    uniq, inverse = np.unique(arr, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def batch_state_values(value_params, states) -> np.ndarray:
    """Value-net outputs over an (n, J) state array."""
    if states.shape[0] == 0:
        return np.zeros(0)
    return nn.forward(value_params, states.astype(float)).reshape(-1)


def batch_kernel_expectation(model, policy, states, zeta_batch) -> np.ndarray:
    """Exact policy-averaged E[zeta(next)] for each row of ``states``.

    Deduplicates repeated states, enumerates each unique state's averaged
    kernel once, and evaluates zeta in one batched call over the union of
    successor states.
    """
    states = np.asarray(states, dtype=np.int64)
    if states.shape[0] == 0:
        return np.zeros(0)
    uniq, inverse = _unique_rows(states)
    succ_index: dict[tuple, int] = {}
    succ_states: list[tuple] = []
    cols: list[list[int]] = []
    weights: list[list[float]] = []
    for row in uniq:
        entries = mdp.policy_kernel(model, policy, tuple(int(v) for v in row))
        c, w = [], []
        for y, p in entries:
            if p <= 0:
                continue
            idx = succ_index.get(y)
            if idx is None:
                idx = len(succ_states)
                succ_index[y] = idx
                succ_states.append(y)
            c.append(idx)
            w.append(p)
        cols.append(c)
        weights.append(w)
    values = zeta_batch(np.array(succ_states, dtype=np.int64))
    out_uniq = np.array(
        [float(np.dot(values[np.array(c)], np.array(w))) for c, w in zip(cols, weights)]
    )
    return out_uniq[inverse]


def batch_targets(batch, cfg: EstimatorConfig, *, avg: float, r_hat: float | None,
                  zeta_batch=None, model=None, policy=None,
                  num_data: int | None = None) -> ValueTargets:
    """Regression targets for every episode via one backward recursion each.

    ``num_data`` limits targets to the first N steps (the remaining tail only
    closes the sums).  With ``zeta_batch`` omitted, zeta is identically zero
    and the AMP variants reduce to their standard counterparts.
    """
    targets = []
    decay = cfg.gamma * cfg.lam
    discounted = cfg.gamma < 1.0 or cfg.value_target == "infinite"
    center = r_hat if (discounted and cfg.value_target == "regenerative") else avg
    for ep in batch:
        T = ep.num_steps
        n = T if num_data is None else min(num_data, T)
        if T == 0:
            targets.append(np.zeros(0))
            continue
        if zeta_batch is None:
            zvals = np.zeros(T + 1)
            pz = np.zeros(T)
        else:
            zvals = zeta_batch(ep.states)
            if cfg.variant == "gae":
                pz = zvals[1:]
            else:
                pz = batch_kernel_expectation(
                    model, policy, ep.states[:T],
                    lambda s: zeta_batch(s),
                )
        delta = ep.costs - center + cfg.gamma * pz[:T] - zvals[:T]
        reset = np.zeros(T + 1, dtype=bool)
        if cfg.value_target == "regenerative":
            for s in ep.sigma:
                if 0 < s <= T:
                    reset[s] = True
        S = np.zeros(T + 1)
        for t in range(T - 1, -1, -1):
            carry = 0.0 if reset[t + 1] else S[t + 1]
            S[t] = delta[t] + decay * carry
        targets.append(zvals[:n] + S[:n])
    return ValueTargets(per_episode=targets, avg_cost=avg, r_star=r_hat)


def batch_advantages(model, value_params, batch, center: float, gamma: float = 1.0,
                     num_data: int | None = None) -> list[np.ndarray]:
    """Exact-expectation advantages at each visited (state, action) pair.

    Deduplicates identical pairs across the batch and evaluates the value net
    once over the union of successor states.
    """
    pair_index: dict[tuple, int] = {}
    pair_entries: list = []
    ep_rows = []
    for ep in batch:
        n = ep.num_steps if num_data is None else min(num_data, ep.num_steps)
        rows = np.empty(n, dtype=np.int64)
        for k in range(n):
            key = (ep.state(k), tuple(int(a) for a in ep.actions[k]))
            idx = pair_index.get(key)
            if idx is None:
                idx = len(pair_entries)
                pair_index[key] = idx
                pair_entries.append(key)
            rows[k] = idx
        ep_rows.append(rows)
    succ_index: dict[tuple, int] = {}
    succ_states: list[tuple] = []
    cols, weights, base_cost, own = [], [], [], []
    for state, action in pair_entries:
        try:
            entries = model.kernel(state, action)
        except InfeasibleAction:
            raise
        c, w = [], []
        for y, p in entries:
            if p <= 0:
                continue
            idx = succ_index.get(y)
            if idx is None:
                idx = len(succ_states)
                succ_index[y] = idx
                succ_states.append(y)
            c.append(idx)
            w.append(p)
        own_idx = succ_index.get(state)
        if own_idx is None:
            own_idx = len(succ_states)
            succ_index[state] = own_idx
            succ_states.append(state)
        cols.append(np.array(c))
        weights.append(np.array(w))
        base_cost.append(model.cost(state))
        own.append(own_idx)
    values = batch_state_values(value_params, np.array(succ_states, dtype=np.int64))
    adv_pairs = np.array(
        [
            g - center + gamma * float(values[c] @ w) - values[o]
            for g, c, w, o in zip(base_cost, cols, weights, own)
        ]
    )
    return [adv_pairs[rows] for rows in ep_rows]
