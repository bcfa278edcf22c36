"""Long-run performance measurement with calibrated confidence intervals.

Per-step averages of the uniformized chain equal continuous-time averages
(steps are i.i.d. exponential with the uniformization rate), so estimates are
reported per unit time with no extra conversion.  Light and medium loads use
the regenerative estimator; heavy loads, where regeneration is rare, use
batch means over one long episode.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import policies, simulate
from .errors import EpisodeTooShort, MissingCheckpoint, TooFewCycles
from .mdp import StepMode
from .rng import stream_for


@dataclass(frozen=True)
class PerfEstimate:
    point: float
    half_width: float
    method: str
    sample_size: int
    confidence: float = 0.95
    seed: int | None = None

    @property
    def lo(self) -> float:
        return self.point - self.half_width

    @property
    def hi(self) -> float:
        return self.point + self.half_width


def regenerative_ci(cycle_costs, cycle_lengths, confidence: float = 0.95,
                    min_cycles: int = 30) -> PerfEstimate:
    """Ratio estimator over i.i.d. cycles with its strongly consistent variance.

    With per-cycle cost sums Y and lengths tau, the point estimate is
    ``sum(Y)/sum(tau)`` and the variance comes from the centered residuals
    ``Y - point * tau``.
    """
    y = np.asarray(cycle_costs, dtype=float)
    tau = np.asarray(cycle_lengths, dtype=float)
    m = y.shape[0]
    if m < min_cycles:
        raise TooFewCycles(f"{m} cycles < required {min_cycles}")
    point = float(y.sum() / tau.sum())
    resid = y - point * tau
    s2 = float(resid @ resid) / (m - 1)
    tau_bar = float(tau.mean())
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    half = z * np.sqrt(s2 / m) / tau_bar
    return PerfEstimate(point, float(half), "regenerative", m, confidence)


def batch_means_ci(step_costs, num_batches: int = 50, confidence: float = 0.95,
                   min_batch_steps: int = 100) -> PerfEstimate:
    """Split one long cost sequence into equal batches and use a t interval."""
    g = np.asarray(step_costs, dtype=float)
    n = g.shape[0]
    blen = n // num_batches
    if blen < min_batch_steps:
        raise EpisodeTooShort(
            f"episode of {n} steps cannot form {num_batches} batches of "
            f">= {min_batch_steps} steps"
        )
    means = g[: blen * num_batches].reshape(num_batches, blen).mean(axis=1)
    return _t_interval(means, confidence)


def batch_means_from_chunks(chunk_sums, chunk_size: int, num_batches: int = 50,
                            confidence: float = 0.95) -> PerfEstimate:
    """Batch means over pre-aggregated fixed-size chunks of a long run.

    Batches are equal-size groups of chunks; at most ``num_batches - 1``
    trailing chunks are discarded.
    """
    sums = np.asarray(chunk_sums, dtype=float)
    per = sums.shape[0] // num_batches
    if per < 1:
        raise EpisodeTooShort(
            f"only {sums.shape[0]} chunks for {num_batches} batches; run longer"
        )
    grouped = sums[: per * num_batches].reshape(num_batches, per).sum(axis=1)
    means = grouped / (per * chunk_size)
    return _t_interval(means, confidence)


def _t_interval(batch_means: np.ndarray, confidence: float) -> PerfEstimate:
    b = batch_means.shape[0]
    point = float(batch_means.mean())
    if b < 2:
        return PerfEstimate(point, 0.0, "batch-means", b, confidence)
    s = float(batch_means.std(ddof=1))
    tq = stats.t.ppf(0.5 + confidence / 2.0, df=b - 1)
    return PerfEstimate(point, float(tq * s / np.sqrt(b)), "batch-means", b, confidence)


@dataclass(frozen=True)
class EvalBudget:
    kind: str  # "cycles" | "arrivals" | "steps"
    amount: int

    def __post_init__(self):
        if self.kind not in ("cycles", "arrivals", "steps"):
            raise ValueError(f"unknown budget kind {self.kind!r}")


def evaluate_policy(model, policy, budget: EvalBudget, *, seed: int = 0,
                    step_mode: StepMode = StepMode.RealTransitionsOnly,
                    confidence: float = 0.95, num_batches: int = 50,
                    chunk_size: int = 4096) -> PerfEstimate:
    """Measure a policy's long-run average cost under the given budget.

    Cycle budgets start at the regeneration state and produce regenerative
    intervals; arrival and step budgets produce batch-means intervals, the
    heavy-load default where regeneration is rare.  Deterministic given the
    seed.
    """
    stream = stream_for(seed, actor=0, iteration=0)
    if budget.kind == "cycles":
        agg = simulate.run_cycles_aggregate(
            model, policy, budget.amount, stream, step_mode=step_mode,
            chunk_size=chunk_size,
        )
        est = regenerative_ci(agg["cycle_costs"], agg["cycle_lengths"], confidence)
    else:
        x0 = model.regeneration_state
        if budget.kind == "arrivals":
            agg = simulate.run_until_arrivals(
                model, policy, x0, budget.amount, stream, step_mode=step_mode,
                chunk_size=chunk_size,
            )
        else:
            desc_steps = budget.amount
            from ._core import simulate_aggregate
            from ._core.descriptors import KernelDescriptor, provider_for
            from ._core.fallback import STOP_STEPS

            agg = simulate_aggregate(
                KernelDescriptor(model), provider_for(policy, model),
                [int(v) for v in x0], STOP_STEPS, desc_steps,
                step_mode is StepMode.EveryTransition, stream, 2**62, chunk_size,
            )
        est = batch_means_from_chunks(agg["chunk_sums"], chunk_size, num_batches,
                                      confidence)
    return PerfEstimate(est.point, est.half_width, est.method, est.sample_size,
                        confidence, seed)


BASELINES = {
    "pr": lambda model: policies.ProportionallyRandomized(),
    "lbfs": lambda model: policies.lbfs(model.num_classes),
    "uniform": lambda model: policies.UniformRandom(),
}


def resolve_policy(model, name: str) -> policies.Policy:
    """Baseline by name ('pr', 'lbfs', 'uniform', 'threshold:T') or a checkpoint path."""
    low = name.lower()
    if low in BASELINES:
        return BASELINES[low](model)
    if low.startswith("threshold:"):
        return policies.Threshold(int(low.split(":", 1)[1]))
    path = Path(name)
    if path.exists():
        params, _ = policies.load_checkpoint(path)
        return policies.NeuralPolicy(params)
    raise MissingCheckpoint(f"no such baseline or checkpoint: {name}")


_CKPT_RE = re.compile(r"checkpoint_(\d+)\.json$")


def learning_curve(checkpoint_dir, model, budget: EvalBudget, *, seed: int = 0,
                   step_mode: StepMode = StepMode.RealTransitionsOnly,
                   out_csv=None) -> list[tuple[int, PerfEstimate]]:
    """Independently evaluate every checkpoint in a run directory.

    Each checkpoint gets its own stream keyed by its iteration number, so
    rows are reproducible individually.  Prefer steps or arrivals budgets
    here: early checkpoints can be close to unstable, where regeneration is
    too rare for a cycle budget to finish in reasonable time.
    """
    ckpts = {}
    for p in Path(checkpoint_dir).glob("checkpoint_*.json"):
        m = _CKPT_RE.search(p.name)
        if m:
            ckpts[int(m.group(1))] = p
    if not ckpts:
        raise MissingCheckpoint(f"no checkpoints under {checkpoint_dir}")
    rows = []
    for it in sorted(ckpts):
        params, _ = policies.load_checkpoint(ckpts[it])
        pol = policies.NeuralPolicy(params)
        est = evaluate_policy(model, pol, budget, seed=seed + it,
                              step_mode=step_mode)
        rows.append((it, est))
    if out_csv:
        write_curve_csv(out_csv, rows)
    return rows


def write_curve_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "avg_cost", "half_width", "method", "samples", "seed"])
        for it, est in rows:
            w.writerow([it, f"{est.point:.10g}", f"{est.half_width:.10g}",
                        est.method, est.sample_size, est.seed])
