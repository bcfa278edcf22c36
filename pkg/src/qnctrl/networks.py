"""Queueing-network instances and their uniformized transition kernels.

A :class:`NetworkSpec` declares a multiclass queueing network (stations, job
classes, Poisson arrival rates, exponential service rates, probabilistic
routing, holding costs).  Uniformization turns the controlled continuous-time
chain into a discrete-time kernel: every step is one event of a Poisson clock
of rate ``B = sum(arrival rates) + sum(service rates)``, and any rate mass not
used by the current state/action pair becomes a fictitious self-loop.

The parallel-server N-model is a separate spec type because its two controls
are priority rules rather than per-station class choices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InfeasibleAction, SingularRouting

#: Sentinel for the idle choice at a station.
IDLE = -1

_RHO_TOL = 1e-9


def _as_rate(value) -> float:
    """Accept floats or exact-fraction strings like '9/140'."""
    if isinstance(value, str):
        return float(Fraction(value))
    return float(value)


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of an open multiclass queueing network.

    Classes and stations are 0-indexed.  ``routing[j][k]`` is the probability
    that a class-``j`` job becomes class ``k`` after service; rows may sum to
    less than 1, the remainder leaves the network.
    """

    name: str
    num_classes: int
    num_stations: int
    station_of: tuple[int, ...]
    arrival_rate: tuple[float, ...]
    service_rate: tuple[float, ...]
    routing: tuple[tuple[float, ...], ...]
    holding_cost: tuple[float, ...]
    cost_form: str = "linear"

    def __post_init__(self):
        if len(self.station_of) != self.num_classes:
            raise ValueError("station_of length must equal num_classes")
        if self.cost_form not in ("linear", "quadratic"):
            raise ValueError(f"unknown cost_form {self.cost_form!r}")

    @property
    def uniformization_rate(self) -> float:
        return float(sum(self.arrival_rate) + sum(self.service_rate))

    def station_classes(self) -> list[list[int]]:
        """Classes served by each station, ascending within a station."""
        out = [[] for _ in range(self.num_stations)]
        for j, ell in enumerate(self.station_of):
            out[ell].append(j)
        return out

    def routing_matrix(self) -> np.ndarray:
        return np.array(self.routing, dtype=float)

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(to_json(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class NModelSpec:
    """Two-server parallel network where class 1 is servable by both servers.

    Traffic parameter ``rho`` scales the arrival rates: class-1 jobs arrive at
    ``1.3 rho`` and class-2 jobs at ``0.4 rho``.  The three activities
    (server 1 on class 1, server 2 on class 1, server 2 on class 2) have mean
    service times 1, 2, 1.  Holding costs are 3 and 1 per job per unit time.
    """

    rho: float = 0.95
    name: str = "nmodel"
    activity_mean: tuple[float, float, float] = (1.0, 2.0, 1.0)
    holding_cost: tuple[float, float] = (3.0, 1.0)
    cost_form: str = "linear"

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")

    @property
    def arrival_rate(self) -> tuple[float, float]:
        return (1.3 * self.rho, 0.4 * self.rho)

    @property
    def activity_rate(self) -> tuple[float, float, float]:
        return tuple(1.0 / m for m in self.activity_mean)

    @property
    def uniformization_rate(self) -> float:
        return float(sum(self.arrival_rate) + sum(self.activity_rate))

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(to_json(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrafficSolution:
    """Solution of the traffic equation q = lambda + R^T q."""

    total_arrival_rate: tuple[float, ...]
    station_load: tuple[float, ...]
    uniformization_rate: float


@dataclass(frozen=True)
class Violation:
    """One failed spec invariant; ``index`` names the offending class/station."""

    code: str
    index: int | None
    message: str

    def __str__(self):
        return self.message


def spectral_radius(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def solve_traffic(spec: NetworkSpec) -> TrafficSolution:
    """Solve the traffic equation and derive station loads.

    Raises :class:`SingularRouting` when the routing matrix is not
    substochastic enough for the network to be open.
    """
    R = spec.routing_matrix()
    if spectral_radius(R) >= 1.0 - _RHO_TOL:
        raise SingularRouting(
            f"routing spectral radius {spectral_radius(R):.6f} >= 1, network is not open"
        )
    lam = np.array(spec.arrival_rate, dtype=float)
    q = np.linalg.solve(np.eye(spec.num_classes) - R.T, lam)
    mu = np.array(spec.service_rate, dtype=float)
    loads = np.zeros(spec.num_stations)
    for ell, classes in enumerate(spec.station_classes()):
        loads[ell] = sum(q[j] / mu[j] for j in classes)
    return TrafficSolution(
        total_arrival_rate=tuple(q),
        station_load=tuple(loads),
        uniformization_rate=spec.uniformization_rate,
    )


def validate(spec: NetworkSpec) -> list[Violation]:
    """Check every NetworkSpec invariant; violations are data, not failures."""
    out: list[Violation] = []
    served = set(spec.station_of)
    for ell in range(spec.num_stations):
        if ell not in served:
            out.append(Violation("StationWithoutClasses", ell, f"station {ell} serves no class"))
    for j, lam in enumerate(spec.arrival_rate):
        if lam < 0:
            out.append(Violation("NegativeArrivalRate", j, f"class {j} arrival rate {lam} < 0"))
    for j, mu in enumerate(spec.service_rate):
        if mu <= 0:
            out.append(Violation("NonPositiveServiceRate", j, f"class {j} service rate {mu} <= 0"))
    for j, h in enumerate(spec.holding_cost):
        if h <= 0:
            out.append(Violation("NonPositiveHoldingCost", j, f"class {j} holding cost {h} <= 0"))
    R = spec.routing_matrix()
    for j in range(spec.num_classes):
        row = R[j]
        if np.any(row < 0) or np.any(row > 1):
            out.append(
                Violation("RoutingEntryOutOfRange", j, f"class {j} routing entries outside [0, 1]")
            )
        elif row.sum() > 1 + 1e-12:
            out.append(
                Violation(
                    "RowNotSubstochastic", j, f"class {j} routing row sums to {row.sum():.6f} > 1"
                )
            )
    if not any(v.code in ("RoutingEntryOutOfRange", "RowNotSubstochastic") for v in out):
        if spectral_radius(R) >= 1.0 - _RHO_TOL:
            out.append(Violation("NetworkNotOpen", None, "routing spectral radius >= 1"))
        elif not any(v.code in ("NonPositiveServiceRate", "NegativeArrivalRate") for v in out):
            traffic = solve_traffic(spec)
            for ell, rho in enumerate(traffic.station_load):
                if rho >= 1:
                    out.append(
                        Violation("LoadExceedsOne", ell, f"station {ell} load {rho:.4f} >= 1")
                    )
    return out


def action_set(spec: NetworkSpec, state) -> list[list[int]]:
    """Feasible choices per station: idle plus every nonempty servable class."""
    x = np.asarray(state)
    return [[IDLE] + [j for j in classes if x[j] >= 1] for classes in spec.station_classes()]


def cost(spec, state) -> float:
    """Holding cost charged per uniformized step at the given jobcount vector."""
    x = np.asarray(state, dtype=float)
    h = np.asarray(spec.holding_cost, dtype=float)
    if spec.cost_form == "quadratic":
        return float(h @ (x * x))
    return float(h @ x)


def transition_distribution(spec: NetworkSpec, state, action, caps=None):
    """Uniformized one-step distribution for a state/action pair.

    Returns a list of ``(next_state, probability)`` in canonical order:
    arrivals by ascending class, then completions by ascending station (each
    with routing targets ascending, departure last), then the fictitious
    self-loop, which is always the final entry even at probability zero.
    ``caps`` (per-class jobcount bounds) redirect any transition that would
    exceed a bound onto the self-loop; that is the truncation used by the
    exact solver.

    Raises :class:`InfeasibleAction` when a non-idle choice serves an empty
    buffer.
    """
    x = tuple(int(v) for v in state)
    J = spec.num_classes
    B = spec.uniformization_rate
    station_classes = spec.station_classes()
    entries: list[tuple[tuple[int, ...], float]] = []

    def push(next_state, prob):
        # blocked transitions fold into the self-loop remainder below
        if caps is None or all(next_state[j] <= caps[j] for j in range(J)):
            entries.append((next_state, prob))

    for j in range(J):
        lam = spec.arrival_rate[j]
        if lam > 0:
            y = list(x)
            y[j] += 1
            push(tuple(y), lam / B)
    for ell in range(spec.num_stations):
        choice = action[ell]
        if choice == IDLE:
            continue
        if choice not in station_classes[ell]:
            raise InfeasibleAction(f"class {choice} is not served at station {ell}")
        if x[choice] < 1:
            raise InfeasibleAction(f"action serves empty buffer {choice} at station {ell}")
        mu = spec.service_rate[choice]
        row = spec.routing[choice]
        depart = 1.0 - sum(row)
        for k in range(J):
            if row[k] > 0:
                y = list(x)
                y[choice] -= 1
                y[k] += 1
                push(tuple(y), mu * row[k] / B)
        if depart > 1e-15:
            y = list(x)
            y[choice] -= 1
            push(tuple(y), mu * depart / B)
    used = sum(p for _, p in entries)
    entries.append((x, 1.0 - used))
    return entries


def nmodel_transition_distribution(spec: NModelSpec, state, action: int, caps=None):
    """Closed-form N-model kernel under priority control ``action`` (1 or 2).

    Work-conserving preemption is encoded in the indicators: server 1 always
    works on class 1 when present; server 2 helps on class 1 only when a
    second class-1 job exists, and under ``action == 1`` it abandons class 2
    to do so.
    """
    if action not in (1, 2):
        raise InfeasibleAction(f"N-model control must be 1 or 2, got {action}")
    x1, x2 = (int(v) for v in state)
    lam1, lam2 = spec.arrival_rate
    mu1, mu2, mu3 = spec.activity_rate
    B = spec.uniformization_rate
    if action == 1:
        p_down1 = (mu1 * (x1 > 0) + mu2 * (x1 > 1)) / B
        p_down2 = (mu3 * (x2 > 0 and x1 <= 1)) / B
    else:
        p_down1 = (mu1 * (x1 > 0) + mu2 * (x1 > 1 and x2 == 0)) / B
        p_down2 = (mu3 * (x2 > 0)) / B
    entries = []

    def push(y, prob):
        if prob <= 0:
            return
        if caps is None or (y[0] <= caps[0] and y[1] <= caps[1]):
            entries.append((y, prob))

    push((x1 + 1, x2), lam1 / B)
    push((x1, x2 + 1), lam2 / B)
    push((x1 - 1, x2), p_down1)
    push((x1, x2 - 1), p_down2)
    used = sum(p for _, p in entries)
    entries.append(((x1, x2), 1.0 - used))
    return entries


# ---------------------------------------------------------------------------
# Fixture builders
# ---------------------------------------------------------------------------

#: Criss-cross load regimes: arrival rate and class service rates reconciled
#: so that every regime reproduces its reported station loads exactly.
CRISS_CROSS_REGIMES = {
    "il": (0.3, (2.0, 1.5, 2.0)),
    "bl": (0.3, (2.0, 1.0, 2.0)),
    "im": (0.6, (2.0, 1.5, 2.0)),
    "bm": (0.6, (2.0, 1.0, 2.0)),
    "ih": (0.9, (2.0, 1.5, 2.0)),
    "bh": (0.9, (2.0, 1.0, 2.0)),
}


def criss_cross(regime: str = "il", cost_form: str = "linear") -> NetworkSpec:
    """Two-station, three-class criss-cross network in a named load regime.

    Station 0 serves classes 0 and 2, station 1 serves class 1; class-0 jobs
    become class 1 after service, classes 1 and 2 leave.
    """
    lam, mu = CRISS_CROSS_REGIMES[regime.lower()]
    routing = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    return NetworkSpec(
        name=f"crisscross-{regime.lower()}",
        num_classes=3,
        num_stations=2,
        station_of=(0, 1, 0),
        arrival_rate=(lam, 0.0, lam),
        service_rate=mu,
        routing=tuple(tuple(r) for r in routing),
        holding_cost=(1.0, 1.0, 1.0),
        cost_form=cost_form,
    )


def extended_six_class(num_stations: int = 2) -> NetworkSpec:
    """Extended six-class network with ``num_stations`` stations (3 classes each).

    Three class chains run through stations 1..L in parallel.  The first and
    third chains are fed externally at rate 9/140; after station L the first
    chain feeds back into the second chain at station 1, the other two leave.
    Service rates cycle with the class index so all station loads equal 0.9.
    """
    L = num_stations
    if L < 1:
        raise ValueError("need at least one station")
    J = 3 * L
    lam_frac = Fraction(9, 140)
    rate_by_mod = {
        1: Fraction(1, 8),
        2: Fraction(1, 2),
        3: Fraction(1, 4),
        4: Fraction(1, 6),
        5: Fraction(1, 7),
        0: Fraction(1, 1),
    }
    arrival = [0.0] * J
    arrival[0] = float(lam_frac)
    arrival[2] = float(lam_frac)
    service = [float(rate_by_mod[(j + 1) % 6]) for j in range(J)]
    station_of = tuple(j // 3 for j in range(J))
    routing = [[0.0] * J for _ in range(J)]
    for j in range(J - 3):
        routing[j][j + 3] = 1.0  # each chain advances one station
    last_first_chain = 3 * (L - 1)
    if L > 1:
        routing[last_first_chain][1] = 1.0  # first chain re-enters as class 2
    else:
        routing[0][1] = 1.0
    return NetworkSpec(
        name=f"sixclass-L{L}",
        num_classes=J,
        num_stations=L,
        station_of=station_of,
        arrival_rate=tuple(arrival),
        service_rate=tuple(service),
        routing=tuple(tuple(r) for r in routing),
        holding_cost=(1.0,) * J,
    )


def single_queue(lam: float = 0.5, mu: float = 1.0) -> NetworkSpec:
    """M/M/1-type fixture; average jobcount under serve-always is rho/(1-rho)."""
    return NetworkSpec(
        name="mm1",
        num_classes=1,
        num_stations=1,
        station_of=(0,),
        arrival_rate=(lam,),
        service_rate=(mu,),
        routing=((0.0,),),
        holding_cost=(1.0,),
    )


# ---------------------------------------------------------------------------
# JSON network-definition files
# ---------------------------------------------------------------------------


def to_json(spec) -> dict:
    """Serialize either spec type to the documented JSON schema."""
    if isinstance(spec, NModelSpec):
        return {
            "type": "nmodel",
            "name": spec.name,
            "rho": spec.rho,
            "activity_mean": list(spec.activity_mean),
            "holding_cost": list(spec.holding_cost),
            "cost_form": spec.cost_form,
        }
    return {
        "type": "mqn",
        "name": spec.name,
        "num_classes": spec.num_classes,
        "num_stations": spec.num_stations,
        "station_of": list(spec.station_of),
        "arrival_rate": list(spec.arrival_rate),
        "service_rate": list(spec.service_rate),
        "routing": [list(r) for r in spec.routing],
        "holding_cost": list(spec.holding_cost),
        "cost_form": spec.cost_form,
    }


def from_json(data: dict):
    """Load a spec from the JSON schema; rate fields accept '9/140' strings."""
    kind = data.get("type", "mqn")
    if kind == "nmodel":
        return NModelSpec(
            rho=_as_rate(data.get("rho", 0.95)),
            name=data.get("name", "nmodel"),
            activity_mean=tuple(_as_rate(v) for v in data.get("activity_mean", (1, 2, 1))),
            holding_cost=tuple(_as_rate(v) for v in data.get("holding_cost", (3, 1))),
            cost_form=data.get("cost_form", "linear"),
        )
    return NetworkSpec(
        name=data.get("name", "network"),
        num_classes=int(data["num_classes"]),
        num_stations=int(data["num_stations"]),
        station_of=tuple(int(v) for v in data["station_of"]),
        arrival_rate=tuple(_as_rate(v) for v in data["arrival_rate"]),
        service_rate=tuple(_as_rate(v) for v in data["service_rate"]),
        routing=tuple(tuple(_as_rate(v) for v in row) for row in data["routing"]),
        holding_cost=tuple(_as_rate(v) for v in data["holding_cost"]),
        cost_form=data.get("cost_form", "linear"),
    )


def load_network(path):
    with open(path) as fh:
        return from_json(json.load(fh))


def fixture_path(name: str) -> Path:
    """Path of a bundled network definition, e.g. 'crisscross_il' or 'nmodel_rho095'."""
    root = Path(__file__).parent / "fixtures"
    path = root / (name if name.endswith(".json") else f"{name}.json")
    if not path.exists():
        known = ", ".join(sorted(p.stem for p in root.glob("*.json")))
        raise FileNotFoundError(f"no fixture {name!r}; available: {known}")
    return path


def load_fixture(name: str):
    return load_network(fixture_path(name))


def save_network(spec, path):
    Path(path).write_text(json.dumps(to_json(spec), indent=2) + "\n")
