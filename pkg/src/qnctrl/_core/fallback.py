"""Pure-Python simulation stepper.

Mirrors the compiled core exactly: same canonical outcome order, same
uniform-consumption contract (see :mod:`qnctrl.mdp`).  Any behavioural change
here must be replicated in ``_simcore.pyx``; the parity tests compare the two
step for step.
"""

from __future__ import annotations

import numpy as np

from .descriptors import (
    KIND_MQN,
    PROVIDER_CACHED,
    PROVIDER_PR,
    PROVIDER_STATIC,
    PROVIDER_THRESHOLD,
    PROVIDER_UNIFORM,
)

STOP_STEPS = 0
STOP_CYCLES = 1
STOP_ARRIVALS = 2

_IDLE = -1


def _cost(desc, x):
    h = desc.holding
    if desc.quadratic:
        return float(sum(h[j] * x[j] * x[j] for j in range(len(x))))
    return float(sum(h[j] * x[j] for j in range(len(x))))


def _choose_action(desc, prov, x, stream, action):
    """Fill ``action`` in place, consuming uniforms per the sampling contract."""
    code = prov.code
    L = desc.num_stations
    offs = desc.station_offs
    flat = desc.station_flat
    if code == PROVIDER_CACHED:
        key = tuple(x)
        law = prov.cache.get(key)
        if law is None:
            law = np.asarray(prov.law_fn(key), dtype=float)
            prov.cache[key] = law
        slot_offs = desc.slot_offs
        for ell in range(L):
            base = slot_offs[ell]
            width = slot_offs[ell + 1] - base
            n_classes = offs[ell + 1] - offs[ell]
            slot = -1
            for i in range(width):
                if law[base + i] == 1.0:
                    slot = i
                    break
            if slot < 0:
                u = stream.next()
                cum = 0.0
                slot = width - 1
                for i in range(width - 1):
                    cum += law[base + i]
                    if u < cum:
                        slot = i
                        break
            action[ell] = flat[offs[ell] + slot] if slot < n_classes else _IDLE
        return
    if code == PROVIDER_PR:
        for ell in range(L):
            lo, hi = offs[ell], offs[ell + 1]
            total = 0
            nonempty = 0
            last = _IDLE
            for i in range(lo, hi):
                xj = x[flat[i]]
                if xj > 0:
                    total += xj
                    nonempty += 1
                    last = flat[i]
            if total == 0:
                action[ell] = _IDLE
            elif nonempty == 1:
                action[ell] = last
            else:
                u = stream.next()
                cum = 0.0
                chosen = _IDLE
                for i in range(lo, hi):
                    cum += x[flat[i]] / total
                    if u < cum:
                        chosen = flat[i]
                        break
                action[ell] = chosen
        return
    if code == PROVIDER_STATIC:
        rank_of = prov.rank_of
        for ell in range(L):
            best = _IDLE
            best_rank = 1 << 60
            for i in range(offs[ell], offs[ell + 1]):
                j = flat[i]
                if x[j] > 0 and rank_of[j] < best_rank:
                    best, best_rank = j, rank_of[j]
            action[ell] = best
        return
    if code == PROVIDER_THRESHOLD:
        action[0] = 0
        action[1] = 0 if x[0] > prov.threshold else 1
        return
    if code == PROVIDER_UNIFORM:
        for ell in range(L):
            lo, hi = offs[ell], offs[ell + 1]
            n = 1
            for i in range(lo, hi):
                if x[flat[i]] > 0:
                    n += 1
            if n == 1:
                action[ell] = _IDLE
                continue
            u = stream.next()
            cum = 0.0
            chosen = _IDLE
            for i in range(lo, hi):
                if x[flat[i]] > 0:
                    cum += 1.0 / n
                    if u < cum:
                        chosen = flat[i]
                        break
            action[ell] = chosen
        return
    raise ValueError(f"unknown provider code {code}")


def _transition(desc, x, action, u):
    """Apply one sampled transition in place; returns (fictitious, arrived)."""
    caps = desc.caps
    cum = 0.0
    if desc.kind == KIND_MQN:
        arr_class = desc.arr_class
        arr_prob = desc.arr_prob
        for i in range(len(arr_class)):
            cum += arr_prob[i]
            if u < cum:
                j = arr_class[i]
                if x[j] + 1 <= caps[j]:
                    x[j] += 1
                    return False, True
                return True, False
        svc_target = desc.svc_target
        svc_prob = desc.svc_prob
        svc_offs = desc.svc_offs
        for ell in range(desc.num_stations):
            j = action[ell]
            if j < 0:
                continue
            for t in range(svc_offs[j], svc_offs[j + 1]):
                cum += svc_prob[t]
                if u < cum:
                    k = svc_target[t]
                    if k < 0:
                        x[j] -= 1
                        return False, False
                    if x[k] + 1 <= caps[k]:
                        x[j] -= 1
                        x[k] += 1
                        return False, False
                    return True, False
        return True, False
    # N-model: two arrivals, then the two priority-dependent departures
    lam = desc.nm_lam
    mu = desc.nm_mu
    x0, x1 = x[0], x[1]
    control1 = action[1] == 0
    if control1:
        d1 = mu[0] * (x0 > 0) + mu[1] * (x0 > 1)
        d2 = mu[2] * (1 if (x1 > 0 and x0 <= 1) else 0)
    else:
        d1 = mu[0] * (x0 > 0) + mu[1] * (1 if (x0 > 1 and x1 == 0) else 0)
        d2 = mu[2] * (x1 > 0)
    cum = lam[0]
    if u < cum:
        if x0 + 1 <= caps[0]:
            x[0] += 1
            return False, True
        return True, False
    cum += lam[1]
    if u < cum:
        if x1 + 1 <= caps[1]:
            x[1] += 1
            return False, True
        return True, False
    cum += d1
    if u < cum:
        x[0] -= 1
        return False, False
    cum += d2
    if u < cum:
        x[1] -= 1
        return False, False
    return True, False


def simulate_episode(desc, prov, x0, stop_kind, stop_n, every_transition, stream,
                     max_steps):
    """Run one actor, recording the full trajectory.

    Returns a dict with states (T+1, J), actions (T, L), costs, fictitious
    flags, post-transition regeneration indices, the arrival count, and
    whether the stop condition was met before ``max_steps``.
    """
    J = desc.num_classes
    L = desc.num_stations
    regen = [int(v) for v in desc.regen]
    x = [int(v) for v in x0]
    cap = 1024
    states = np.empty((cap + 1, J), dtype=np.int64)
    actions = np.empty((cap, L), dtype=np.int64)
    costs = np.empty(cap, dtype=float)
    fict = np.empty(cap, dtype=bool)
    states[0] = x
    sigma = []
    action = [0] * L
    t = 0
    arrivals = 0
    cycles = 0
    prev_fict = False
    done = stop_n <= 0
    while not done and t < max_steps:
        if t == cap:
            cap *= 2
            grown = np.empty((cap + 1, J), np.int64)
            grown[: t + 1] = states[: t + 1]
            states = grown
            actions = np.resize(actions, (cap, L))
            costs = np.resize(costs, cap)
            fict = np.resize(fict, cap)
        if every_transition or not prev_fict:
            _choose_action(desc, prov, x, stream, action)
        costs[t] = _cost(desc, x)
        actions[t] = action
        was_fict, arrived = _transition(desc, x, action, stream.next())
        fict[t] = was_fict
        arrivals += arrived
        t += 1
        states[t] = x
        prev_fict = was_fict
        if x == regen:
            sigma.append(t)
            cycles += 1
        if stop_kind == STOP_STEPS:
            done = t >= stop_n
        elif stop_kind == STOP_CYCLES:
            done = cycles >= stop_n
        else:
            done = arrivals >= stop_n
    return {
        "states": states[: t + 1].copy(),
        "actions": actions[:t].copy(),
        "costs": costs[:t].copy(),
        "fictitious": fict[:t].copy(),
        "sigma": np.array(sigma, dtype=np.int64),
        "arrivals": arrivals,
        "completed": bool(done),
    }


def simulate_aggregate(desc, prov, x0, stop_kind, stop_n, every_transition, stream,
                       max_steps, chunk_size=4096):
    """Run one actor keeping only evaluation aggregates.

    Records per-cycle cost sums and lengths (segments between successive
    regeneration visits; a head segment not started at the regeneration state
    is discarded) plus fixed-size chunk cost sums for batch-means intervals.
    """
    regen = [int(v) for v in desc.regen]
    x = [int(v) for v in x0]
    L = desc.num_stations
    action = [0] * L
    t = 0
    arrivals = 0
    total_cost = 0.0
    cyc_y: list[float] = []
    cyc_tau: list[int] = []
    run_y = 0.0
    run_tau = 0
    valid_cycle = x == regen
    chunk_sums: list[float] = []
    chunk_acc = 0.0
    chunk_fill = 0
    prev_fict = False
    done = stop_n <= 0
    while not done and t < max_steps:
        if every_transition or not prev_fict:
            _choose_action(desc, prov, x, stream, action)
        c = _cost(desc, x)
        total_cost += c
        run_y += c
        run_tau += 1
        chunk_acc += c
        chunk_fill += 1
        if chunk_fill == chunk_size:
            chunk_sums.append(chunk_acc)
            chunk_acc = 0.0
            chunk_fill = 0
        was_fict, arrived = _transition(desc, x, action, stream.next())
        arrivals += arrived
        t += 1
        prev_fict = was_fict
        if x == regen:
            if valid_cycle:
                cyc_y.append(run_y)
                cyc_tau.append(run_tau)
            run_y = 0.0
            run_tau = 0
            valid_cycle = True
        if stop_kind == STOP_STEPS:
            done = t >= stop_n
        elif stop_kind == STOP_CYCLES:
            done = len(cyc_y) >= stop_n
        else:
            done = arrivals >= stop_n
    return {
        "steps": t,
        "total_cost": total_cost,
        "arrivals": arrivals,
        "cycle_costs": np.array(cyc_y, dtype=float),
        "cycle_lengths": np.array(cyc_tau, dtype=np.int64),
        "chunk_sums": np.array(chunk_sums, dtype=float),
        "chunk_size": chunk_size,
        "final_state": tuple(x),
        "completed": bool(done),
    }
