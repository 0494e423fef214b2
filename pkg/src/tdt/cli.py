"""Command-line driver: ``python -m tdt <command> ...`` or ``tdt <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as tdt_io
from .decoding import DecodePolicy, TabularJoiner, emission_stats, greedy_rnnt, greedy_tdt
from .gradients import GradOptions, rnnt_loss_and_grad, tdt_loss_and_grad
from .lattice import DurationSet, alignment_posterior, rnnt_loss, rnnt_tables, split_log_probs, tdt_loss, tdt_tables
from .oracle import finite_diff, relative_error
from .synth import APPENDIX_D, posterior_csv, posterior_pgm, run_experiment, write_results

PRESETS = {"appendix-d": APPENDIX_D}


def _format_loss(x: float) -> str:
    return "%#.12g" % x


def cmd_loss(args) -> int:
    problem = tdt_io.read_problem(args.problem)
    fn = rnnt_loss if args.rnnt else tdt_loss
    print(_format_loss(fn(problem, args.sigma)))
    return 0


def _bundle(problem, args):
    lam = getattr(args, "fastemit", 0.0)
    if args.rnnt:
        return rnnt_loss_and_grad(problem, args.sigma, lam)
    return tdt_loss_and_grad(problem, GradOptions(sigma=args.sigma, fastemit_lambda=lam))


def cmd_grad(args) -> int:
    problem = tdt_io.read_problem(args.problem)
    bundle = _bundle(problem, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tdt_io.write_tensor(bundle.token_logit_grad, out / "token_grad.tdtt")
    tdt_io.write_tensor(bundle.duration_logit_grad, out / "duration_grad.tdtt")
    print(_format_loss(bundle.loss))
    return 0


def cmd_gradcheck(args) -> int:
    problem = tdt_io.read_problem(args.problem)
    bundle = _bundle(problem, args)
    if args.rnnt:
        numeric = finite_diff(lambda p: rnnt_loss(p, args.sigma), problem, args.h)
    else:
        numeric = finite_diff(lambda p: tdt_loss(p, args.sigma), problem, args.h)
    analytic = np.concatenate([bundle.token_logit_grad, bundle.duration_logit_grad], axis=-1)
    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    print(
        f"max relative error {err[worst]:.3e} at (t={worst[0]}, u={worst[1]}, k={worst[2]}): "
        f"analytic {analytic[worst]:.12g}, numeric {numeric[worst]:.12g}"
    )
    return 0 if err[worst] <= args.tol else 1


def cmd_decode(args) -> int:
    problem = tdt_io.read_problem(args.problem)
    policy = DecodePolicy(args.max_symbols or None)
    joiner = TabularJoiner(problem)
    if args.rnnt:
        result = greedy_rnnt(joiner, problem.T, policy)
    else:
        result = greedy_tdt(joiner, problem.T, problem.durations, policy)
    print(result.to_json())
    if args.stats:
        print(json.dumps(emission_stats([result]).to_dict()))
    return 0


def cmd_align(args) -> int:
    problem = tdt_io.read_problem(args.problem)
    token_logp, duration_logp = split_log_probs(problem, args.sigma)
    if args.rnnt:
        tables = rnnt_tables(token_logp, problem.targets)
    else:
        tables = tdt_tables(token_logp, duration_logp, problem.targets, problem.durations)
    post = alignment_posterior(tables.alpha, tables.beta, tables.total_logprob)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "alignment.csv").write_text(posterior_csv(post.normalized))
    (out / "alignment_raw.csv").write_text(posterior_csv(post.raw))
    (out / "alignment.pgm").write_bytes(posterior_pgm(post.normalized))
    return 0


def cmd_experiment(args) -> int:
    config = PRESETS[args.preset]
    overrides = {
        "T": args.T, "U": args.U, "V": args.V, "N_d": args.n_durations, "sigma": args.sigma,
        "fastemit_lambda": args.fastemit, "omega": args.omega, "learning_rate": args.lr,
        "steps": args.steps, "seed": args.seed,
    }
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    if args.durations is not None:
        ds = DurationSet.parse(args.durations)
        config = replace(config, durations=tuple(ds), N_d=len(ds))
    elif args.n_durations is not None:
        config = replace(config, durations=None)
    result = run_experiment(config)
    write_results(result, args.out)
    print(json.dumps(result.summary()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdt", description="Token-and-duration transducer tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def problem_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--problem", required=True, help="joint problem file (TDTP)")
        p.add_argument("--sigma", type=float, default=0.0, help="logit under-normalization")
        p.add_argument("--rnnt", action="store_true", help="use the conventional transducer lattice")
        return p

    p = problem_cmd("loss", "print the negative log-probability")
    p.set_defaults(func=cmd_loss)

    p = problem_cmd("grad", "write token and duration logit gradients")
    p.add_argument("--fastemit", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_grad)

    p = problem_cmd("gradcheck", "compare analytic gradients with central differences")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("decode", help="greedy decode a stored joint")
    p.add_argument("--problem", required=True)
    p.add_argument("--rnnt", action="store_true")
    p.add_argument("--max-symbols", type=int, default=10, help="0 disables the guard")
    p.add_argument("--stats", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = problem_cmd("align", "write alignment posterior CSV and PGM")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("experiment", help="run a simulated-joint force-alignment experiment")
    p.add_argument("--preset", choices=sorted(PRESETS), default="appendix-d")
    p.add_argument("--T", type=int)
    p.add_argument("--U", type=int)
    p.add_argument("--V", type=int)
    p.add_argument("--n-durations", type=int, help="use durations 0..N-1")
    p.add_argument("--durations", help='explicit set, e.g. "0-8" or "0,1,2,4"')
    p.add_argument("--sigma", type=float)
    p.add_argument("--fastemit", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
