"""Clipped-surrogate policy optimization for long-run average cost.

One iteration: generate a batch of episodes under the current policy, compute
centering constants (average cost, and for the discounted algorithm the
present discounted value at the regeneration state), build value-regression
targets with the previous value net as control variate, refit the value net,
compute exact-expectation advantages with the fresh value net, then take E
epochs of minibatch Adam on the clipped surrogate.  Costs are minimized, so a
positive advantage marks an unfavorable action and the surrogate is the
pessimistic max of the clipped and unclipped terms.

Algorithm 1 uses plain regenerative value targets, algorithm 2 adds the
martingale control variate, algorithm 3 switches to fixed-horizon episodes
with discounted regenerative targets (or their one-replication variant).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import estimators, nn, policies
from .errors import CycleBudgetExceeded, NonFiniteLoss, UnstablePolicy
from .estimators import EstimatorConfig
from .mdp import StepMode
from .rng import philox_generator
from .simulate import GenerationPlan, generate_batch

_VALUE_SHUFFLE = 1_000_001
_POLICY_SHUFFLE = 1_000_002
_POOL_DRAW = 1_000_003
_INIT_KEY = 1_000_004


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference schedules.

    ``alpha = (I - i)/I`` decays linearly per iteration and drives the clip
    parameter ``0.2 * max(alpha, 0.01)`` and the policy learning rate
    ``5e-4 * max(alpha, 0.05)``; the value learning rate stays constant.
    """

    algorithm: int = 2  # 1 plain, 2 AMP, 3 discounted
    iterations: int = 50
    num_actors: int = 5
    cycles: int = 500  # per actor, algorithms 1 and 2
    horizon: int = 10_000  # N, algorithm 3
    tail: int | None = None  # L, algorithm 3 (default: from gamma)
    gamma: float = 0.998
    lam: float = 0.99
    epochs: int = 3
    value_epochs: int | None = None  # defaults to ``epochs``
    minibatch: int = 2048
    clip_base: float = 0.2
    clip_floor: float = 0.01
    policy_lr_base: float = 5e-4
    policy_lr_floor: float = 0.05
    value_lr: float = 2.5e-4
    estimator: str = "amp"  # "amp" | "gae" (algorithm 3 only)
    seed: int = 0
    workers: int = 1
    max_steps_per_actor: int = 10_000_000
    checkpoint_every: int = 10
    step_mode: StepMode = StepMode.EveryTransition

    def __post_init__(self):
        if self.algorithm not in (1, 2, 3):
            raise ValueError("algorithm must be 1, 2 or 3")
        if not 0.0 < self.clip_base < 1.0:
            raise ValueError("clip parameter must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")

    def alpha(self, iteration: int) -> float:
        return (self.iterations - iteration) / max(self.iterations, 1)

    def clip(self, iteration: int) -> float:
        return self.clip_base * max(self.alpha(iteration), self.clip_floor)

    def policy_lr(self, iteration: int) -> float:
        return self.policy_lr_base * max(self.alpha(iteration), self.policy_lr_floor)

    def tail_length(self) -> int:
        if self.tail is not None:
            return self.tail
        if self.gamma >= 1.0:
            return 0
        return estimators.default_tail(self.gamma)


@dataclass
class IterationReport:
    iteration: int
    avg_cost: float
    r_star: float | None
    value_loss: float
    surrogate_loss: float
    clip_fraction: float
    samples: int
    wall_time: float


@dataclass
class TrainResult:
    policy_params: nn.MlpParams
    value_params: nn.MlpParams
    reports: list[IterationReport]
    checkpoints: dict[int, str] = field(default_factory=dict)


def clipped_surrogate(model, params, states, actions, advantages, logp_old,
                      epsilon: float):
    """Loss, logit-space gradient and clip fraction of one sample batch.

    The loss is ``mean(max(r A, clip(r) A))`` with ``r`` the folded-law
    probability ratio; gradient flows only where the unclipped branch attains
    the max.
    """
    out, cache = nn.forward_with_cache(params, states.astype(float))
    folded, raw = policies.station_softmax(model, out, states)
    n = states.shape[0]
    logp = np.zeros(n)
    for ell in range(model.num_stations):
        choices = list(model.station_classes[ell]) + (
            [-1] if model.allow_idle else []
        )
        idx = np.array([choices.index(int(a)) for a in actions[:, ell]])
        logp += np.log(np.clip(folded[ell][np.arange(n), idx], 1e-300, None))
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    loss = float(np.maximum(unclipped, clipped).mean())
    flow = unclipped >= clipped
    coef = np.where(flow, ratio * advantages, 0.0) / n
    dlogp = policies.logit_grad_log_prob(model, raw, folded, states, actions)
    grad_logits = coef[:, None] * dlogp
    clip_fraction = float(np.mean(clipped > unclipped))
    if not np.isfinite(loss):
        raise NonFiniteLoss("clipped surrogate is not finite")
    grads = nn.backward(params, states.astype(float), grad_logits, cache=cache)
    return loss, grads, clip_fraction


def fit_value(params: nn.MlpParams, adam: nn.AdamState, states, targets, *,
              epochs: int, minibatch: int, learning_rate: float,
              gen: np.random.Generator) -> float:
    """Minibatch Adam on mean squared error; returns the final epoch's mean loss."""
    n = states.shape[0]
    last = 0.0
    for _ in range(epochs):
        order = gen.permutation(n)
        losses = []
        for start in range(0, n, minibatch):
            rows = order[start : start + minibatch]
            xb = states[rows].astype(float)
            out, cache = nn.forward_with_cache(params, xb)
            err = out.reshape(-1) - targets[rows]
            losses.append(float(np.mean(err * err)))
            gout = (2.0 * err / len(rows))[:, None]
            grads = nn.backward(params, xb, gout, cache=cache)
            nn.adam_step(params, adam, grads, learning_rate)
        last = float(np.mean(losses))
    if not np.isfinite(last):
        raise NonFiniteLoss("value regression loss is not finite")
    return last


def _flatten_batch(batch, num_data):
    states, actions = [], []
    for ep in batch:
        n = ep.num_steps if num_data is None else min(num_data, ep.num_steps)
        states.append(ep.states[:n])
        actions.append(ep.actions[:n])
    return np.concatenate(states), np.concatenate(actions)


def train(model, config: TrainConfig, run_dir=None, *, init_policy=None,
          log=None) -> TrainResult:
    """Run the selected algorithm for ``config.iterations`` policy iterations.

    ``init_policy`` overrides Xavier initialization with pre-trained
    parameters (behavior cloning for large networks).  Checkpoints and a
    per-iteration CSV land in ``run_dir`` when given.  Fully reproducible
    from (seed, worker count), and worker count never changes the numbers.
    """
    arch = nn.MlpArchitecture.policy(model.num_classes, model.num_stations)
    if init_policy is not None:
        policy_params = init_policy.copy()
    else:
        policy_params = nn.xavier_init(arch, philox_generator(config.seed, _INIT_KEY))
    value_arch = nn.MlpArchitecture.value(model.num_classes)
    # Trainable weights start at Xavier (an all-zero tanh net is a saddle the
    # optimizer cannot leave); the first iteration's control variate is still
    # the zero function, so its targets coincide with the plain estimator.
    value_params = nn.xavier_init(value_arch, philox_generator(config.seed, _INIT_KEY, 1))
    prev_value_params = None
    policy_adam = nn.AdamState(policy_params)
    value_adam = nn.AdamState(value_params)

    run_path = Path(run_dir) if run_dir is not None else None
    checkpoints: dict[int, str] = {}
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)
        _save_checkpoint(run_path, 0, model, policy_params, checkpoints)

    discounted = config.algorithm == 3
    tail = config.tail_length() if discounted else 0
    cfg_est = EstimatorConfig(
        gamma=config.gamma if discounted else 1.0,
        lam=config.lam if discounted else 1.0,
        tail=tail,
        variant=config.estimator if discounted else ("amp" if config.algorithm == 2 else "standard"),
        value_target="regenerative",
    )
    pool = None
    reports: list[IterationReport] = []
    for i in range(config.iterations):
        t0 = time.perf_counter()
        behavior = policies.NeuralPolicy(policy_params)
        if discounted:
            plan = GenerationPlan(
                num_actors=config.num_actors, mode="steps",
                budget=config.horizon + tail, step_mode=config.step_mode,
                initial_states=pool, iteration=i,
                max_steps=config.max_steps_per_actor,
            )
        else:
            plan = GenerationPlan(
                num_actors=config.num_actors, mode="cycles", budget=config.cycles,
                step_mode=config.step_mode, iteration=i,
                max_steps=config.max_steps_per_actor,
            )
        try:
            batch = generate_batch(model, behavior, plan, config.seed,
                                   workers=config.workers)
        except CycleBudgetExceeded as exc:
            raise UnstablePolicy(f"iteration {i}: {exc}") from exc

        avg = estimators.avg_cost(batch)
        r_hat = None
        if discounted:
            r_hat = estimators.r_star(batch, config.gamma, tail)
        num_data = config.horizon if discounted else None

        if config.algorithm == 1 or prev_value_params is None:
            zeta_batch = None  # f(-1) is the zero function
        else:
            prev = prev_value_params
            # the control variate must vanish at the regeneration state
            offset = float(
                nn.forward(prev, np.array(model.regeneration_state, float))[0]
            )

            def zeta_batch(arr, _p=prev, _off=offset):
                return estimators.batch_state_values(_p, np.asarray(arr)) - _off

        targets = estimators.batch_targets(
            batch, cfg_est, avg=avg, r_hat=r_hat, zeta_batch=zeta_batch,
            model=model, policy=behavior, num_data=num_data,
        )
        flat_states, flat_actions = _flatten_batch(batch, num_data)
        flat_targets = np.concatenate(targets.per_episode)
        gen_v = philox_generator(config.seed, _VALUE_SHUFFLE, i)
        value_loss = fit_value(
            value_params, value_adam, flat_states, flat_targets,
            epochs=config.value_epochs or config.epochs,
            minibatch=config.minibatch,
            learning_rate=config.value_lr, gen=gen_v,
        )
        prev_value_params = value_params.copy()

        adv_center = r_hat if discounted else avg
        adv_gamma = config.gamma if discounted else 1.0
        adv = np.concatenate(
            estimators.batch_advantages(model, value_params, batch, adv_center,
                                        gamma=adv_gamma, num_data=num_data)
        )
        logp_old = policies.batch_log_probs(model, policy_params, flat_states,
                                            flat_actions)
        eps = config.clip(i)
        lr = config.policy_lr(i)
        gen_p = philox_generator(config.seed, _POLICY_SHUFFLE, i)
        n = flat_states.shape[0]
        sur_loss = 0.0
        clip_frac = 0.0
        batches_done = 0
        for _ in range(config.epochs):
            order = gen_p.permutation(n)
            for start in range(0, n, config.minibatch):
                rows = order[start : start + config.minibatch]
                loss, grads, cf = clipped_surrogate(
                    model, policy_params, flat_states[rows], flat_actions[rows],
                    adv[rows], logp_old[rows], eps,
                )
                nn.adam_step(policy_params, policy_adam, grads, lr)
                sur_loss += loss
                clip_frac += cf
                batches_done += 1
        sur_loss /= max(batches_done, 1)
        clip_frac /= max(batches_done, 1)

        if discounted:
            gen_pool = philox_generator(config.seed, _POOL_DRAW, i)
            all_states = np.concatenate([ep.states for ep in batch])
            rows = gen_pool.integers(0, all_states.shape[0], size=config.num_actors)
            pool = [tuple(int(v) for v in all_states[r]) for r in rows]

        reports.append(
            IterationReport(
                iteration=i, avg_cost=avg, r_star=r_hat, value_loss=value_loss,
                surrogate_loss=sur_loss, clip_fraction=clip_frac, samples=n,
                wall_time=time.perf_counter() - t0,
            )
        )
        if log:
            log(reports[-1])
        if run_path is not None and (i + 1) % config.checkpoint_every == 0:
            _save_checkpoint(run_path, i + 1, model, policy_params, checkpoints)

    if run_path is not None:
        if config.iterations % config.checkpoint_every != 0 or config.iterations == 0:
            _save_checkpoint(run_path, config.iterations, model, policy_params,
                             checkpoints)
        _write_reports(run_path / "reports.csv", reports)
        (run_path / "train_config.json").write_text(
            json.dumps({k: (v.value if isinstance(v, StepMode) else v)
                        for k, v in asdict(config).items()}, indent=2) + "\n"
        )
    return TrainResult(policy_params, value_params, reports, checkpoints)


def _save_checkpoint(run_path: Path, iteration: int, model, params, registry):
    path = run_path / "checkpoints" / f"checkpoint_{iteration:04d}.json"
    fp = model.spec.fingerprint() if model.spec is not None else ""
    policies.save_checkpoint(path, params, spec_fingerprint=fp,
                             extra={"iteration": iteration})
    registry[iteration] = str(path)


def _write_reports(path, reports):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "avg_cost", "r_star", "value_loss",
                    "surrogate_loss", "clip_fraction", "samples", "wall_time"])
        for r in reports:
            w.writerow([
                r.iteration, f"{r.avg_cost:.10g}",
                "" if r.r_star is None else f"{r.r_star:.10g}",
                f"{r.value_loss:.10g}", f"{r.surrogate_loss:.10g}",
                f"{r.clip_fraction:.6f}", r.samples, f"{r.wall_time:.3f}",
            ])
