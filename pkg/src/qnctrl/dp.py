"""Exact solvers on truncated state spaces.

Truncation redirects any move past a per-class cap onto the fictitious
self-loop (arrival blocking), which keeps every kernel stochastic; the
reported truncation-sensitivity delta quantifies the induced bias.

Relative value iteration exploits the per-station decomposition of the
Bellman operator for multiclass networks: arrival terms are action free and
each station independently minimizes its own completion term, so a sweep
costs a handful of gathers instead of one pass per joint action.  A generic
joint-action sweep covers every other model and doubles as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mdp, policies
from .errors import BoxTooSmall, Diverged, Reducible
from .networks import IDLE


@dataclass(frozen=True)
class TruncationBox:
    """Per-class jobcount caps with a row-major state enumeration."""

    caps: tuple[int, ...]
    max_states: int = 5_000_000

    def __post_init__(self):
        if any(c < 1 for c in self.caps):
            raise ValueError("caps must be at least 1")
        if self.num_states > self.max_states:
            raise ValueError(f"box has {self.num_states} states, above the memory bound")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.caps)

    @property
    def num_states(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def all_states(self) -> np.ndarray:
        grids = np.indices(self.dims)
        return grids.reshape(len(self.caps), -1).T.astype(np.int64)

    def index_of(self, state) -> int:
        return int(np.ravel_multi_index(tuple(int(v) for v in state), self.dims))

    def ravel(self, states: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(states.T), self.dims)

    def grow(self, extra: int) -> "TruncationBox":
        return TruncationBox(tuple(c + extra for c in self.caps), max_states=self.max_states)


@dataclass
class ExactSolution:
    average_cost: float
    values: np.ndarray
    greedy: np.ndarray
    residual_span: float
    sensitivity_delta: float | None
    box: TruncationBox
    iterations: int

    def value_at(self, state) -> float:
        return float(self.values[self.box.index_of(state)])

    def greedy_action(self, state) -> tuple[int, ...]:
        return tuple(int(a) for a in self.greedy[self.box.index_of(state)])


class GreedyTablePolicy(policies.Policy):
    """Point-mass policy read from a per-state action table on a box."""

    def __init__(self, box: TruncationBox, table: np.ndarray):
        self.box = box
        self.table = table

    def action_law(self, model, state):
        action = self.table[self.box.index_of(state)]
        laws = []
        for ell in range(model.num_stations):
            choices = list(model.station_classes[ell]) + ([IDLE] if model.allow_idle else [])
            probs = np.zeros(len(choices))
            probs[choices.index(int(action[ell]))] = 1.0
            laws.append((probs, tuple(choices)))
        return policies.ActionLaw(laws)

    def batch_action_laws(self, model, states):
        rows = self.box.ravel(np.asarray(states, dtype=np.int64))
        acts = self.table[rows]
        out = []
        for ell in range(model.num_stations):
            choices = list(model.station_classes[ell]) + ([IDLE] if model.allow_idle else [])
            law = np.zeros((states.shape[0], len(choices)))
            for slot, choice in enumerate(choices):
                law[acts[:, ell] == choice, slot] = 1.0
            out.append(law)
        return out


def _capped_model(model, box: TruncationBox):
    return model.with_caps(box.caps)


# ---------------------------------------------------------------------------
# Bellman sweeps
# ---------------------------------------------------------------------------


class _MqnSweep:
    """Station-decomposed Bellman operator for a capped multiclass network."""

    def __init__(self, model, box: TruncationBox):
        spec = model.spec
        self.model = model
        self.box = box
        states = box.all_states()
        n = states.shape[0]
        J = spec.num_classes
        B = spec.uniformization_rate
        self_idx = np.arange(n, dtype=np.int64)
        self.costs = _state_costs(model, states)
        self.arr = []
        for j in range(J):
            lam = spec.arrival_rate[j]
            if lam <= 0:
                continue
            nxt = states.copy()
            nxt[:, j] += 1
            ok = nxt[:, j] <= box.caps[j]
            idx = np.where(ok, box.ravel(np.minimum(nxt, box.caps)), self_idx)
            self.arr.append((lam / B, idx.astype(np.int64)))
        self.svc = []  # per class: (mu/B, feasible, [(share, idx)...])
        for j in range(J):
            feas = states[:, j] >= 1
            down = states.copy()
            down[:, j] = np.maximum(down[:, j] - 1, 0)
            pieces = []
            row = spec.routing[j]
            for k in range(J):
                if row[k] > 0:
                    tgt = down.copy()
                    tgt[:, k] += 1
                    ok = tgt[:, k] <= box.caps[k]
                    idx = np.where(ok, box.ravel(np.minimum(tgt, box.caps)), self_idx)
                    pieces.append((row[k], idx.astype(np.int64)))
            depart = 1.0 - sum(row)
            if depart > 1e-15:
                pieces.append((depart, box.ravel(down).astype(np.int64)))
            self.svc.append((spec.service_rate[j] / B, feas, pieces))
        self.stations = model.station_classes

    def apply(self, v: np.ndarray, greedy_out: np.ndarray | None = None) -> np.ndarray:
        w = self.costs + v
        for p, idx in self.arr:
            w += p * (v[idx] - v)
        qs = {}
        for j, (rate, feas, pieces) in enumerate(self.svc):
            acc = np.zeros_like(v)
            for share, idx in pieces:
                acc += share * v[idx]
            qs[j] = rate * (acc - v)
        for ell, classes in enumerate(self.stations):
            best = np.zeros_like(v)
            if greedy_out is not None:
                choice = np.full(v.shape[0], IDLE, dtype=np.int64)
            for j in classes:
                qj = np.where(self.svc[j][1], qs[j], np.inf)
                if greedy_out is not None:
                    better = qj < best
                    choice = np.where(better, j, choice)
                best = np.minimum(best, qj)
            w += best
            if greedy_out is not None:
                greedy_out[:, ell] = choice
        return w


class _GenericSweep:
    """Joint-action Bellman operator built by enumerating the kernel."""

    def __init__(self, model, box: TruncationBox):
        self.model = model
        self.box = box
        states = box.all_states()
        n = states.shape[0]
        self.costs = np.array([model.cost(tuple(s)) for s in states])
        self.actions = model.enumerate_actions()
        self.tables = []
        for action in self.actions:
            feas = np.ones(n, dtype=bool)
            width = 0
            rows_entries = []
            for i, s in enumerate(states):
                st = tuple(int(v) for v in s)
                if model.allow_idle and any(a != IDLE and st[a] < 1 for a in action):
                    feas[i] = False
                    rows_entries.append([])
                    continue
                entries = model.kernel(st, action)
                rows_entries.append([(self.box.index_of(y), p) for y, p in entries])
                width = max(width, len(entries))
            idx = np.zeros((n, width), dtype=np.int64)
            prob = np.zeros((n, width))
            for i, entries in enumerate(rows_entries):
                for c, (yi, p) in enumerate(entries):
                    idx[i, c] = yi
                    prob[i, c] = p
            self.tables.append((feas, idx, prob))

    def apply(self, v: np.ndarray, greedy_out: np.ndarray | None = None) -> np.ndarray:
        best = np.full(v.shape[0], np.inf)
        best_a = np.zeros(v.shape[0], dtype=np.int64)
        for ai, (feas, idx, prob) in enumerate(self.tables):
            q = (prob * v[idx]).sum(axis=1)
            q = np.where(feas, q, np.inf)
            if greedy_out is not None:
                better = q < best
                best_a = np.where(better, ai, best_a)
            best = np.minimum(best, q)
        if greedy_out is not None:
            acts = np.array(self.actions, dtype=np.int64)
            greedy_out[:] = acts[best_a]
        return self.costs + best


def _make_sweep(model, box):
    if isinstance(model, mdp.QueueNetworkModel):
        return _MqnSweep(model, box)
    return _GenericSweep(model, box)


def relative_value_iteration(model, box: TruncationBox, tol: float = 1e-6, *,
                             max_iters: int = 2_000_000, v0: np.ndarray | None = None,
                             sensitivity: bool = True, sensitivity_extra: int = 10,
                             sensitivity_limit: float = 5e-3) -> ExactSolution:
    """Optimal average cost and bias on the box, anchored at the regeneration state.

    Stops when the span of the Bellman increment falls below ``tol``; the
    average cost is the midpoint of the span bounds.  With ``sensitivity``
    the box grows by ``sensitivity_extra`` per class and is re-solved (warm
    started); a relative shift above ``sensitivity_limit`` raises
    :class:`BoxTooSmall`.
    """
    capped = _capped_model(model, box)
    sweep = _make_sweep(capped, box)
    i0 = box.index_of(capped.regeneration_state)
    v = np.zeros(box.num_states) if v0 is None else v0.astype(float).copy()
    span = np.inf
    avg = np.nan
    iters = 0
    for iters in range(1, max_iters + 1):
        w = sweep.apply(v)
        delta = w - v
        lo, hi = float(delta.min()), float(delta.max())
        span = hi - lo
        avg = 0.5 * (lo + hi)
        v = w - w[i0]
        if span < tol:
            break
    else:
        raise Diverged(f"relative value iteration: span {span:.3e} after {max_iters} sweeps")
    greedy = np.zeros((box.num_states, capped.num_stations), dtype=np.int64)
    sweep.apply(v, greedy_out=greedy)
    delta_rel = None
    if sensitivity:
        bigger = box.grow(sensitivity_extra)
        big_states = bigger.all_states()
        clipped = np.minimum(big_states, np.array(box.caps))
        warm = v[box.ravel(clipped)]
        big = relative_value_iteration(
            model, bigger, tol, max_iters=max_iters, v0=warm, sensitivity=False
        )
        delta_rel = abs(big.average_cost - avg) / max(abs(avg), 1e-12)
        if delta_rel > sensitivity_limit:
            raise BoxTooSmall(
                f"average cost moved {delta_rel:.2%} when growing the box by "
                f"{sensitivity_extra}; enlarge the caps"
            )
    return ExactSolution(
        average_cost=avg,
        values=v,
        greedy=greedy,
        residual_span=span,
        sensitivity_delta=delta_rel,
        box=box,
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# Exact policy evaluation
# ---------------------------------------------------------------------------


def _policy_matrix(model, policy, box: TruncationBox) -> sp.csr_matrix:
    """Sparse transition matrix of the policy-induced chain on the box.

    Assembled from batched per-station laws: completion mass for class j is
    the law's mass on serving j times its service share, so the matrix never
    enumerates joint actions.  Blocked moves keep their mass on the diagonal.
    """
    capped = _capped_model(model, box)
    n = box.num_states
    states = box.all_states()
    if isinstance(capped, mdp.TabularModel):
        rows, cols, data = [], [], []
        for i in range(n):
            st = tuple(int(v) for v in states[i])
            for y, p in mdp.policy_kernel(capped, policy, st):
                if p > 0:
                    rows.append(i)
                    cols.append(box.index_of(y))
                    data.append(p)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    laws = policies.batch_action_laws(capped, policy, states)
    self_idx = np.arange(n, dtype=np.int64)
    used = np.zeros(n)
    rows_l, cols_l, data_l = [], [], []

    def emit(cols, data):
        keep = data > 0
        rows_l.append(self_idx[keep])
        cols_l.append(cols[keep])
        data_l.append(data[keep])
        used[keep] += data[keep]

    if isinstance(capped, mdp.NModel):
        spec = capped.spec
        B = spec.uniformization_rate
        lam = np.array(spec.arrival_rate) / B
        mu = np.array(spec.activity_rate) / B
        x0 = states[:, 0]
        x1 = states[:, 1]
        w1 = laws[1][:, 0]  # priority to class 0
        w2 = laws[1][:, 1]
        for j, lam_j in enumerate(lam):
            nxt = states.copy()
            nxt[:, j] += 1
            ok = nxt[:, j] <= box.caps[j]
            cols = np.where(ok, box.ravel(np.minimum(nxt, box.caps)), self_idx)
            emit(np.where(ok, cols, self_idx),
                 np.where(ok, lam_j, 0.0) * np.ones(n))
        d1 = w1 * (mu[0] * (x0 > 0) + mu[1] * (x0 > 1)) + w2 * (
            mu[0] * (x0 > 0) + mu[1] * ((x0 > 1) & (x1 == 0))
        )
        d2 = w1 * (mu[2] * ((x1 > 0) & (x0 <= 1))) + w2 * (mu[2] * (x1 > 0))
        down1 = states.copy()
        down1[:, 0] = np.maximum(down1[:, 0] - 1, 0)
        emit(box.ravel(down1), d1)
        down2 = states.copy()
        down2[:, 1] = np.maximum(down2[:, 1] - 1, 0)
        emit(box.ravel(down2), d2)
    else:
        spec = capped.spec
        B = spec.uniformization_rate
        for j in range(spec.num_classes):
            lam_j = spec.arrival_rate[j]
            if lam_j <= 0:
                continue
            nxt = states.copy()
            nxt[:, j] += 1
            ok = nxt[:, j] <= box.caps[j]
            cols = np.where(ok, box.ravel(np.minimum(nxt, box.caps)), self_idx)
            emit(np.where(ok, cols, self_idx),
                 np.where(ok, lam_j / B, 0.0) * np.ones(n))
        for ell, classes in enumerate(capped.station_classes):
            for slot, j in enumerate(classes):
                w = laws[ell][:, slot]
                mu_j = spec.service_rate[j]
                row = spec.routing[j]
                down = states.copy()
                down[:, j] = np.maximum(down[:, j] - 1, 0)
                for k in range(spec.num_classes):
                    if row[k] <= 0:
                        continue
                    tgt = down.copy()
                    tgt[:, k] += 1
                    ok = tgt[:, k] <= box.caps[k]
                    cols = np.where(ok, box.ravel(np.minimum(tgt, box.caps)), self_idx)
                    emit(np.where(ok, cols, self_idx),
                         np.where(ok, w * mu_j * row[k] / B, 0.0))
                depart = 1.0 - sum(row)
                if depart > 1e-15:
                    emit(box.ravel(down), w * mu_j * depart / B)
    # fictitious remainder on the diagonal
    rows_l.append(self_idx)
    cols_l.append(self_idx)
    data_l.append(1.0 - used)
    P = sp.csr_matrix(
        (np.concatenate(data_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
        shape=(n, n),
    )
    P.sum_duplicates()
    return P


def _solve_sparse(A: sp.csr_matrix, b: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Sparse solve with iterative refinement down to an absolute residual.

    Small systems use a direct factorization; larger ones (3D boxes, where LU
    fill explodes) use ILU-preconditioned LGMRES.
    """
    n = A.shape[0]
    A_csc = A.tocsc()
    solve = None
    if n <= 30_000:
        try:
            lu = spla.splu(A_csc)
            solve = lu.solve
        except (MemoryError, RuntimeError):
            solve = None
    if solve is None:
        ilu = spla.spilu(A_csc, drop_tol=1e-4, fill_factor=30)
        M = spla.LinearOperator(A.shape, ilu.solve)

        def solve(rhs):
            x, info = spla.lgmres(A, rhs, M=M, rtol=1e-12, atol=0.0, maxiter=2000)
            if info != 0:
                raise Reducible("iterative linear solve failed to converge")
            return x

    x = solve(b)
    for _ in range(4):
        r = b - A @ x
        if float(np.max(np.abs(r))) < tol:
            break
        x = x + solve(r)
    return x


def evaluate_policy_exact(model, policy, box: TruncationBox, *,
                          residual_tol: float = 1e-9):
    """Average cost and relative value of a fixed policy on the box.

    Solves the Poisson system with the value anchored to zero at the
    regeneration state; the average cost rides along as the regeneration
    column of the bordered matrix.
    """
    capped = _capped_model(model, box)
    P = _policy_matrix(model, policy, box)
    n = box.num_states
    states = box.all_states()
    g = _state_costs(capped, states)
    i0 = box.index_of(capped.regeneration_state)
    A = (sp.identity(n, format="csr") - P).tocoo()
    keep = A.col != i0
    rows = np.concatenate([A.row[keep], np.arange(n)])
    cols = np.concatenate([A.col[keep], np.full(n, i0)])
    data = np.concatenate([A.data[keep], np.ones(n)])
    M = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    try:
        sol = _solve_sparse(M, g)
    except Exception as exc:
        raise Reducible(f"Poisson solve failed: {exc}") from exc
    avg = float(sol[i0])
    h = sol.copy()
    h[i0] = 0.0
    residual = g - avg - (sp.identity(n, format="csr") - P) @ h
    res = float(np.max(np.abs(residual)))
    if not np.isfinite(res) or res > residual_tol:
        raise Reducible(
            f"Poisson residual {res:.3e} exceeds {residual_tol:.1e}; "
            "the induced chain is likely not unichain on this box"
        )
    return avg, h


def _state_costs(model, states) -> np.ndarray:
    spec = model.spec if model.spec is not None else None
    if spec is not None:
        h = np.array(spec.holding_cost, dtype=float)
        xs = states.astype(float)
        return (xs * xs) @ h if spec.cost_form == "quadratic" else xs @ h
    return np.array([model.cost(tuple(s)) for s in states])


def evaluate_discounted_exact(model, policy, box: TruncationBox, gamma: float, *,
                              residual_tol: float = 1e-9):
    """Present discounted value r(x*) plus both discounted value functions.

    ``V`` solves ``g - r + gamma P V - V = 0`` with ``V(x*) = 0``; ``J``
    solves the same equation centered at the long-run average cost.  Both are
    read from one factorization of ``I - gamma P``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1) for the discounted solve")
    capped = _capped_model(model, box)
    P = _policy_matrix(model, policy, box)
    n = box.num_states
    g = _state_costs(capped, box.all_states())
    i0 = box.index_of(capped.regeneration_state)
    A = (sp.identity(n, format="csr") - gamma * P).tocsr()
    u = _solve_sparse(A, g)
    r = float((1.0 - gamma) * u[i0])
    V = u - r / (1.0 - gamma)
    avg, _ = evaluate_policy_exact(model, policy, box)
    J = u - avg / (1.0 - gamma)
    for name, vec, center in (("V", V, r), ("J", J, avg)):
        res = float(np.max(np.abs(g - center + gamma * (P @ vec) - vec)))
        if res > residual_tol:
            raise Reducible(f"discounted solve residual for {name} is {res:.3e}")
    return r, V, J


def best_threshold(nmodel_model, box: TruncationBox, thresholds) -> tuple[int, dict]:
    """Exactly evaluate Threshold(T) for each T; returns the argmin and the table."""
    table = {}
    for T in thresholds:
        avg, _ = evaluate_policy_exact(nmodel_model, policies.Threshold(T), box)
        table[int(T)] = avg
    best = min(table, key=table.get)
    return best, table
