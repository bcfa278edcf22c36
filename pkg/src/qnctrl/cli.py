"""Command-line entry point wiring fixtures, oracles, training and evaluation.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.  Every
command accepts ``--seed`` and is deterministic under it; a manifest is
written to the output directory before any compute starts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dp, evaluate, networks, policies, ppo, simulate
from .errors import QnctrlError
from .mdp import StepMode, make_model
from .rng import philox_generator, stream_for


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "options": {k: str(v) for k, v in vars(args).items() if k != "func"},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "output_dir": str(out_dir),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load(args):
    return networks.load_network(args.network)


def cmd_validate(args) -> int:
    spec = _load(args)
    if isinstance(spec, networks.NModelSpec):
        print(f"{spec.name}: N-model, rho={spec.rho}, B={spec.uniformization_rate:.6g}")
        return 0
    violations = networks.validate(spec)
    if violations:
        for v in violations:
            print(f"VIOLATION {v.code}: {v.message}")
        return 1
    traffic = networks.solve_traffic(spec)
    q = ", ".join(f"{v:.6g}" for v in traffic.total_arrival_rate)
    rho = ", ".join(f"{v:.6g}" for v in traffic.station_load)
    print(f"{spec.name}: OK")
    print(f"  q   = ({q})")
    print(f"  rho = ({rho})")
    print(f"  B   = {traffic.uniformization_rate:.6g}")
    return 0


def cmd_solve_dp(args) -> int:
    spec = _load(args)
    caps = tuple(int(c) for c in args.caps.split(","))
    model = make_model(spec)
    box = dp.TruncationBox(caps)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        _write_manifest(out_dir, "solve-dp", args)
    sol = dp.relative_value_iteration(
        model, box, tol=args.tol, sensitivity=not args.no_sensitivity,
    )
    delta = "n/a" if sol.sensitivity_delta is None else f"{sol.sensitivity_delta:.4%}"
    print(f"{spec.name}: optimal average cost {sol.average_cost:.6f} "
          f"(span {sol.residual_span:.2e}, sweeps {sol.iterations}, "
          f"sensitivity delta {delta})")
    if out_dir:
        np.save(out_dir / "values.npy", sol.values)
        np.save(out_dir / "greedy.npy", sol.greedy)
        (out_dir / "solution.json").write_text(json.dumps({
            "average_cost": sol.average_cost,
            "residual_span": sol.residual_span,
            "sensitivity_delta": sol.sensitivity_delta,
            "caps": list(caps),
            "iterations": sol.iterations,
        }, indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    spec = _load(args)
    model = make_model(spec)
    config = ppo.TrainConfig(
        algorithm=args.algorithm,
        iterations=args.iterations,
        num_actors=args.actors,
        cycles=args.cycles,
        horizon=args.horizon,
        tail=args.tail,
        gamma=args.gamma,
        lam=args.lam,
        estimator=args.estimator,
        seed=args.seed,
        workers=args.workers,
    )
    out_dir = Path(args.out)
    _write_manifest(out_dir, "train", args)
    init_params = None
    if args.init == "pr-clone":
        stream = stream_for(args.seed, actor=900_001, iteration=0)
        teacher = policies.ProportionallyRandomized()
        episode = simulate.run_steps(model, teacher, model.regeneration_state,
                                     args.clone_steps, stream)
        states = episode.states[: episode.num_steps]
        init_params, kl = policies.clone_from_teacher(
            model, teacher, states, seed=args.seed)
        print(f"cloned initial policy from PR teacher, held-out KL {kl:.4f}")
    elif args.init not in (None, "xavier"):
        init_params, _ = policies.load_checkpoint(args.init)

    def log(rep):
        rs = "" if rep.r_star is None else f" r*={rep.r_star:.4f}"
        print(f"iter {rep.iteration:4d}  avg={rep.avg_cost:.4f}{rs} "
              f"vloss={rep.value_loss:.4g} clip={rep.clip_fraction:.2f} "
              f"n={rep.samples} ({rep.wall_time:.1f}s)")

    result = ppo.train(model, config, run_dir=out_dir, init_policy=init_params,
                       log=log if not args.quiet else None)
    print(f"run complete: {len(result.reports)} iterations, "
          f"checkpoints in {out_dir / 'checkpoints'}")
    return 0


def cmd_evaluate(args) -> int:
    spec = _load(args)
    model = make_model(spec)
    budgets = [(k, getattr(args, k)) for k in ("cycles", "arrivals", "steps")
               if getattr(args, k)]
    if len(budgets) != 1:
        print("specify exactly one of --cycles / --arrivals / --steps", file=sys.stderr)
        return 2
    kind, amount = budgets[0]
    budget = evaluate.EvalBudget(kind, int(amount))
    mode = StepMode.EveryTransition if args.mode == "version2" else StepMode.RealTransitionsOnly
    out = Path(args.out) if args.out else None
    if args.curve:
        rows = evaluate.learning_curve(args.curve, model, budget, seed=args.seed,
                                       step_mode=mode)
        for it, est in rows:
            print(f"iter {it:4d}: {est.point:.4f} +- {est.half_width:.4f}")
        if out:
            evaluate.write_curve_csv(out, rows)
        return 0
    policy = evaluate.resolve_policy(model, args.policy)
    est = evaluate.evaluate_policy(model, policy, budget, seed=args.seed,
                                   step_mode=mode)
    print(f"{args.policy}: {est.point:.6f} +- {est.half_width:.6f} "
          f"({est.method}, n={est.sample_size}, seed={est.seed})")
    if out:
        evaluate.write_curve_csv(out, [(0, est)])
    return 0


def cmd_bench(args) -> int:
    from . import _core
    from ._core import descriptors, fallback

    spec = _load(args)
    model = make_model(spec)
    policy = evaluate.resolve_policy(model, args.policy)
    desc = descriptors.KernelDescriptor(model)
    results = {}
    outputs = {}
    impls = [("fallback", fallback)]
    if _core.COMPILED:
        from ._core import _simcore

        impls.append(("compiled", _simcore))
    for name, impl in impls:
        prov = descriptors.provider_for(policy, model)
        stream = stream_for(args.seed)
        t0 = time.perf_counter()
        out = impl.simulate_episode(
            desc, prov, list(model.regeneration_state), fallback.STOP_STEPS,
            args.steps, True, stream, 2 * args.steps + 16,
        )
        dt = time.perf_counter() - t0
        results[name] = dt
        outputs[name] = out
        print(f"{name:9s}: {args.steps / dt / 1e6:8.3f} M steps/s  ({dt:.3f}s)")
    if len(results) == 2:
        identical = all(
            np.array_equal(outputs["fallback"][k], outputs["compiled"][k])
            for k in ("states", "actions", "costs", "fictitious", "sigma")
        )
        print(f"speedup: {results['fallback'] / results['compiled']:.1f}x, "
              f"trajectories identical: {identical}")
        if not identical:
            return 2
    else:
        print("compiled core unavailable; benchmarked fallback only")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnctrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a network definition and print its traffic solution")
    v.add_argument("--network", required=True)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve-dp", help="optimal average cost by relative value iteration")
    s.add_argument("--network", required=True)
    s.add_argument("--caps", required=True, help="per-class caps, e.g. 40,40,40")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--no-sensitivity", action="store_true")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_solve_dp)

    t = sub.add_parser("train", help="run a PPO training experiment")
    t.add_argument("--network", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--algorithm", type=int, choices=(1, 2, 3), default=2)
    t.add_argument("--estimator", choices=("amp", "gae"), default="amp")
    t.add_argument("--iterations", type=int, default=50)
    t.add_argument("--actors", type=int, default=5)
    t.add_argument("--cycles", type=int, default=500)
    t.add_argument("--horizon", type=int, default=10_000)
    t.add_argument("--tail", type=int, default=None)
    t.add_argument("--gamma", type=float, default=0.998)
    t.add_argument("--lam", type=float, default=0.99)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--init", default="xavier",
                   help="'xavier', 'pr-clone', or a checkpoint path")
    t.add_argument("--clone-steps", type=int, default=100_000)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="measure a policy or a checkpoint directory")
    e.add_argument("--network", required=True)
    e.add_argument("--policy", default="pr",
                   help="pr | lbfs | uniform | threshold:T | checkpoint path")
    e.add_argument("--curve", default=None,
                   help="checkpoint directory for a learning curve")
    e.add_argument("--cycles", type=int, default=None)
    e.add_argument("--arrivals", type=int, default=None)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--mode", choices=("version1", "version2"), default="version1")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="compare the compiled and fallback simulation cores")
    b.add_argument("--network", required=True)
    b.add_argument("--policy", default="pr")
    b.add_argument("--steps", type=int, default=200_000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except QnctrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
