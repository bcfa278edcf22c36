# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled simulation stepper; must mirror fallback.py step for step.

Both implementations share the uniform-consumption contract, so episodes are
bitwise identical between them (enforced by the parity tests).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF IDLE = -1

STOP_STEPS = 0
STOP_CYCLES = 1
STOP_ARRIVALS = 2

KIND_MQN = 0
KIND_NMODEL = 1

PROVIDER_CACHED = 0
PROVIDER_PR = 1
PROVIDER_STATIC = 2
PROVIDER_THRESHOLD = 3
PROVIDER_UNIFORM = 4


cdef class _Stream:
    """View onto a Python UniformStream; position syncs back on release."""

    cdef object py
    cdef double[::1] buf
    cdef Py_ssize_t pos
    cdef Py_ssize_t n

    def __init__(self, py_stream):
        self.py = py_stream
        self.buf = py_stream.buffer
        self.pos = py_stream.pos
        self.n = self.buf.shape[0]

    cdef double next(self) except? -1.0:
        cdef double u
        if self.pos >= self.n:
            self.buf = self.py.refill()
            self.pos = 0
            self.n = self.buf.shape[0]
        u = self.buf[self.pos]
        self.pos += 1
        return u

    cdef void release(self):
        self.py.pos = self.pos


cdef class _Sim:
    """Unpacked descriptor plus per-run policy state."""

    cdef public object desc, prov
    cdef int kind, code, allow_idle
    cdef Py_ssize_t J, L
    cdef long long threshold
    cdef long long[::1] station_flat, station_offs, slot_offs, caps, regen, rank_of
    cdef double[::1] holding
    cdef int quadratic
    # MQN kernel
    cdef long long[::1] arr_class, svc_target, svc_offs
    cdef double[::1] arr_prob, svc_prob
    cdef Py_ssize_t n_arr
    # N-model kernel
    cdef double nm_lam0, nm_lam1, nm_mu0, nm_mu1, nm_mu2
    # cached-law policy
    cdef object cache, law_fn
    cdef object cur_key
    cdef double[::1] cur_law

    def __init__(self, desc, prov):
        self.desc = desc
        self.prov = prov
        self.kind = desc.kind
        self.code = prov.code
        self.allow_idle = 1 if desc.allow_idle else 0
        self.J = desc.num_classes
        self.L = desc.num_stations
        self.station_flat = desc.station_flat
        self.station_offs = desc.station_offs
        self.slot_offs = desc.slot_offs
        self.caps = desc.caps
        self.regen = desc.regen
        self.holding = desc.holding
        self.quadratic = 1 if desc.quadratic else 0
        self.rank_of = prov.rank_of
        self.threshold = prov.threshold
        self.cache = prov.cache
        self.law_fn = prov.law_fn
        self.cur_key = None
        if self.kind == KIND_MQN:
            self.arr_class = desc.arr_class
            self.arr_prob = desc.arr_prob
            self.n_arr = desc.arr_class.shape[0]
            self.svc_target = desc.svc_target
            self.svc_prob = desc.svc_prob
            self.svc_offs = desc.svc_offs
        else:
            self.nm_lam0 = desc.nm_lam[0]
            self.nm_lam1 = desc.nm_lam[1]
            self.nm_mu0 = desc.nm_mu[0]
            self.nm_mu1 = desc.nm_mu[1]
            self.nm_mu2 = desc.nm_mu[2]

    cdef double cost(self, long long[::1] x):
        cdef double total = 0.0
        cdef Py_ssize_t j
        if self.quadratic:
            for j in range(self.J):
                total += self.holding[j] * x[j] * x[j]
        else:
            for j in range(self.J):
                total += self.holding[j] * x[j]
        return total

    cdef int is_regen(self, long long[::1] x):
        cdef Py_ssize_t j
        for j in range(self.J):
            if x[j] != self.regen[j]:
                return 0
        return 1

    cdef int choose_action(self, long long[::1] x, long long[::1] action,
                           _Stream stream) except -1:
        cdef Py_ssize_t ell, i, lo, hi, base, width, n_classes, slot
        cdef long long total, xj, best, best_rank, chosen, j
        cdef long long nonempty, last, n
        cdef double u, cum
        cdef double[::1] law
        if self.code == PROVIDER_CACHED:
            key = tuple([x[i] for i in range(self.J)])
            if self.cur_key is None or key != self.cur_key:
                obj = self.cache.get(key)
                if obj is None:
                    obj = np.asarray(self.law_fn(key), dtype=float)
                    self.cache[key] = obj
                self.cur_key = key
                self.cur_law = obj
            law = self.cur_law
            for ell in range(self.L):
                base = self.slot_offs[ell]
                width = self.slot_offs[ell + 1] - base
                n_classes = self.station_offs[ell + 1] - self.station_offs[ell]
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
                if slot < n_classes:
                    action[ell] = self.station_flat[self.station_offs[ell] + slot]
                else:
                    action[ell] = IDLE
            return 0
        if self.code == PROVIDER_PR:
            for ell in range(self.L):
                lo = self.station_offs[ell]
                hi = self.station_offs[ell + 1]
                total = 0
                nonempty = 0
                last = IDLE
                for i in range(lo, hi):
                    xj = x[self.station_flat[i]]
                    if xj > 0:
                        total += xj
                        nonempty += 1
                        last = self.station_flat[i]
                if total == 0:
                    action[ell] = IDLE
                elif nonempty == 1:
                    action[ell] = last
                else:
                    u = stream.next()
                    cum = 0.0
                    chosen = IDLE
                    for i in range(lo, hi):
                        cum += (<double> x[self.station_flat[i]]) / (<double> total)
                        if u < cum:
                            chosen = self.station_flat[i]
                            break
                    action[ell] = chosen
            return 0
        if self.code == PROVIDER_STATIC:
            for ell in range(self.L):
                best = IDLE
                best_rank = <long long> 1 << 60
                for i in range(self.station_offs[ell], self.station_offs[ell + 1]):
                    j = self.station_flat[i]
                    if x[j] > 0 and self.rank_of[j] < best_rank:
                        best = j
                        best_rank = self.rank_of[j]
                action[ell] = best
            return 0
        if self.code == PROVIDER_THRESHOLD:
            action[0] = 0
            action[1] = 0 if x[0] > self.threshold else 1
            return 0
        if self.code == PROVIDER_UNIFORM:
            for ell in range(self.L):
                lo = self.station_offs[ell]
                hi = self.station_offs[ell + 1]
                n = 1
                for i in range(lo, hi):
                    if x[self.station_flat[i]] > 0:
                        n += 1
                if n == 1:
                    action[ell] = IDLE
                    continue
                u = stream.next()
                cum = 0.0
                chosen = IDLE
                for i in range(lo, hi):
                    if x[self.station_flat[i]] > 0:
                        cum += 1.0 / (<double> n)
                        if u < cum:
                            chosen = self.station_flat[i]
                            break
                action[ell] = chosen
            return 0
        raise ValueError("unknown provider code")

    cdef int transition(self, long long[::1] x, long long[::1] action, double u,
                        int* arrived):
        """Apply one transition in place; returns 1 when fictitious."""
        cdef double cum = 0.0
        cdef double d1, d2
        cdef Py_ssize_t i, ell
        cdef long long j, k, t, x0, x1
        arrived[0] = 0
        if self.kind == KIND_MQN:
            for i in range(self.n_arr):
                cum += self.arr_prob[i]
                if u < cum:
                    j = self.arr_class[i]
                    if x[j] + 1 <= self.caps[j]:
                        x[j] += 1
                        arrived[0] = 1
                        return 0
                    return 1
            for ell in range(self.L):
                j = action[ell]
                if j < 0:
                    continue
                for t in range(self.svc_offs[j], self.svc_offs[j + 1]):
                    cum += self.svc_prob[t]
                    if u < cum:
                        k = self.svc_target[t]
                        if k < 0:
                            x[j] -= 1
                            return 0
                        if x[k] + 1 <= self.caps[k]:
                            x[j] -= 1
                            x[k] += 1
                            return 0
                        return 1
            return 1
        x0 = x[0]
        x1 = x[1]
        if action[1] == 0:
            d1 = self.nm_mu0 * (x0 > 0) + self.nm_mu1 * (x0 > 1)
            d2 = self.nm_mu2 * (1 if (x1 > 0 and x0 <= 1) else 0)
        else:
            d1 = self.nm_mu0 * (x0 > 0) + self.nm_mu1 * (1 if (x0 > 1 and x1 == 0) else 0)
            d2 = self.nm_mu2 * (x1 > 0)
        cum = self.nm_lam0
        if u < cum:
            if x0 + 1 <= self.caps[0]:
                x[0] += 1
                arrived[0] = 1
                return 0
            return 1
        cum += self.nm_lam1
        if u < cum:
            if x1 + 1 <= self.caps[1]:
                x[1] += 1
                arrived[0] = 1
                return 0
            return 1
        cum += d1
        if u < cum:
            x[0] -= 1
            return 0
        cum += d2
        if u < cum:
            x[1] -= 1
            return 0
        return 1


def simulate_episode(desc, prov, x0, int stop_kind, long long stop_n,
                     bint every_transition, stream, long long max_steps):
    cdef _Sim sim = _Sim(desc, prov)
    cdef _Stream st = _Stream(stream)
    cdef Py_ssize_t J = sim.J
    cdef Py_ssize_t L = sim.L
    cdef long long cap = 1024
    states_arr = np.empty((cap + 1, J), dtype=np.int64)
    actions_arr = np.empty((cap, L), dtype=np.int64)
    costs_arr = np.empty(cap, dtype=float)
    fict_arr = np.empty(cap, dtype=np.uint8)
    cdef long long[:, ::1] states = states_arr
    cdef long long[:, ::1] actions = actions_arr
    cdef double[::1] costs = costs_arr
    cdef unsigned char[::1] fict = fict_arr
    x_arr = np.array(x0, dtype=np.int64)
    cdef long long[::1] x = x_arr
    act_arr = np.zeros(L, dtype=np.int64)
    cdef long long[::1] action = act_arr
    sigma = []
    cdef long long t = 0
    cdef long long arrivals = 0
    cdef long long cycles = 0
    cdef int prev_fict = 0
    cdef int was_fict = 0
    cdef int arrived = 0
    cdef bint done = stop_n <= 0
    cdef Py_ssize_t j
    for j in range(J):
        states[0, j] = x[j]
    try:
        while (not done) and t < max_steps:
            if t == cap:
                cap *= 2
                new_states = np.empty((cap + 1, J), dtype=np.int64)
                new_states[: t + 1] = states_arr[: t + 1]
                states_arr = new_states
                states = states_arr
                actions_arr = np.resize(actions_arr, (cap, L))
                actions = actions_arr
                costs_arr = np.resize(costs_arr, cap)
                costs = costs_arr
                fict_arr = np.resize(fict_arr, cap)
                fict = fict_arr
            if every_transition or not prev_fict:
                sim.choose_action(x, action, st)
            costs[t] = sim.cost(x)
            for j in range(L):
                actions[t, j] = action[j]
            was_fict = sim.transition(x, action, st.next(), &arrived)
            fict[t] = was_fict
            arrivals += arrived
            t += 1
            for j in range(J):
                states[t, j] = x[j]
            prev_fict = was_fict
            if sim.is_regen(x):
                sigma.append(t)
                cycles += 1
            if stop_kind == 0:
                done = t >= stop_n
            elif stop_kind == 1:
                done = cycles >= stop_n
            else:
                done = arrivals >= stop_n
    finally:
        st.release()
    return {
        "states": states_arr[: t + 1].copy(),
        "actions": actions_arr[:t].copy(),
        "costs": costs_arr[:t].copy(),
        "fictitious": fict_arr[:t].astype(bool),
        "sigma": np.array(sigma, dtype=np.int64),
        "arrivals": arrivals,
        "completed": bool(done),
    }


def simulate_aggregate(desc, prov, x0, int stop_kind, long long stop_n,
                       bint every_transition, stream, long long max_steps,
                       long long chunk_size=4096):
    cdef _Sim sim = _Sim(desc, prov)
    cdef _Stream st = _Stream(stream)
    cdef Py_ssize_t L = sim.L
    x_arr = np.array(x0, dtype=np.int64)
    cdef long long[::1] x = x_arr
    act_arr = np.zeros(L, dtype=np.int64)
    cdef long long[::1] action = act_arr
    cdef long long t = 0
    cdef long long arrivals = 0
    cdef double total_cost = 0.0
    cdef double run_y = 0.0
    cdef long long run_tau = 0
    cdef int valid_cycle = sim.is_regen(x)
    cdef double chunk_acc = 0.0
    cdef long long chunk_fill = 0
    cdef int prev_fict = 0
    cdef int was_fict = 0
    cdef int arrived = 0
    cdef double c
    cdef bint done = stop_n <= 0
    cyc_y = []
    cyc_tau = []
    chunk_sums = []
    try:
        while (not done) and t < max_steps:
            if every_transition or not prev_fict:
                sim.choose_action(x, action, st)
            c = sim.cost(x)
            total_cost += c
            run_y += c
            run_tau += 1
            chunk_acc += c
            chunk_fill += 1
            if chunk_fill == chunk_size:
                chunk_sums.append(chunk_acc)
                chunk_acc = 0.0
                chunk_fill = 0
            was_fict = sim.transition(x, action, st.next(), &arrived)
            arrivals += arrived
            t += 1
            prev_fict = was_fict
            if sim.is_regen(x):
                if valid_cycle:
                    cyc_y.append(run_y)
                    cyc_tau.append(run_tau)
                run_y = 0.0
                run_tau = 0
                valid_cycle = 1
            if stop_kind == 0:
                done = t >= stop_n
            elif stop_kind == 1:
                done = len(cyc_y) >= stop_n
            else:
                done = arrivals >= stop_n
    finally:
        st.release()
    return {
        "steps": t,
        "total_cost": total_cost,
        "arrivals": arrivals,
        "cycle_costs": np.array(cyc_y, dtype=float),
        "cycle_lengths": np.array(cyc_tau, dtype=np.int64),
        "chunk_sums": np.array(chunk_sums, dtype=float),
        "chunk_size": chunk_size,
        "final_state": tuple(x_arr.tolist()),
        "completed": bool(done),
    }
