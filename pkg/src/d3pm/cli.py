"""Command-line surface. Emits plot-ready CSV/JSON, never interactive.

Subcommands: ``schedule inspect``, ``corrupt``, ``train``, ``sample``,
``eval-nll``, ``verify``. Every emitted file carries a comment header with
the full configuration hash and the RNG seed that produced it.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import verify as verify_mod
from .data import (Dataset, batch_to_csv, estimate_marginal, gen_swiss_roll,
                   gen_synthetic, load_char_corpus, load_checkpoint,
                   save_checkpoint)
from .denoiser import SGD, Adam, DenoiserConfig, MicroDenoiser, train_step
from .estimator import reverse_step_grid
from .exceptions import D3PMError
from .loss import vb_terms
from .process import ForwardProcess, SequenceBatch
from .reverse import ancestral_sample
from .schedule import Schedule, make_schedule, mi_fraction, mi_schedule
from .transition import TransitionSpec
from .util import config_hash, rng_from_seed, write_csv

LN2 = float(np.log(2.0))


def _add_spec_flags(p):
    p.add_argument("--family", default="uniform",
                   choices=["uniform", "absorbing", "gaussian", "embedding",
                            "band_diagonal", "absorbing_uniform"])
    p.add_argument("--K", type=int, default=32, help="number of categories")
    p.add_argument("--absorbing-index", type=int, default=None,
                   help="absorbing category (default K-1 for absorbing families)")
    p.add_argument("--band-width", type=int, default=None)
    p.add_argument("--neighbor-count", type=int, default=None)
    p.add_argument("--mix-alpha", type=float, default=None)
    p.add_argument("--mix-beta", type=float, default=None)


def _add_schedule_flags(p):
    p.add_argument("--schedule", default="cosine",
                   choices=["linear", "cosine", "jacobi", "mi"])
    p.add_argument("--T", type=int, default=100, help="diffusion steps")
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.add_argument("--cosine-s", type=float, default=0.008)
    p.add_argument("--mi-grid", type=int, default=256)
    p.add_argument("--alpha-star", type=float, default=None)


def _add_data_flags(p):
    p.add_argument("--data", default="swiss-roll",
                   choices=["swiss-roll", "chars", "synthetic"])
    p.add_argument("--n", type=int, default=10000, help="sample count (generated data)")
    p.add_argument("--grid", type=int, default=32, help="swiss-roll cells per axis")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--corpus", default=None, help="text file for --data chars")
    p.add_argument("--chunk-len", type=int, default=64)
    p.add_argument("--D", type=int, default=2, help="dimensions (synthetic data)")


def _build_spec(args) -> TransitionSpec:
    m = args.absorbing_index
    if m is None and args.family in ("absorbing", "absorbing_uniform"):
        m = args.K - 1
    v = args.band_width if args.family == "band_diagonal" else args.band_width
    k = args.neighbor_count
    if args.family == "band_diagonal" and v is None:
        v = 1
    if args.family == "embedding" and k is None:
        k = 2
    return TransitionSpec(family=args.family, num_categories=args.K,
                          absorbing_index=m, band_width=v, neighbor_count=k,
                          mix_alpha=args.mix_alpha, mix_beta=args.mix_beta)


def _build_schedule(args, spec, batch=None) -> Schedule:
    if args.schedule == "mi":
        if batch is None:
            raise D3PMError("the mi schedule needs a dataset for the empirical marginal")
        p0 = estimate_marginal(batch, spec.num_categories)
        return mi_schedule(spec, p0=p0, num_steps=args.T, grid_size=args.mi_grid,
                           alpha_star=args.alpha_star)
    return make_schedule(args.schedule, args.T, beta_min=args.beta_min,
                         beta_max=args.beta_max, cosine_s=args.cosine_s)


def _build_dataset(args) -> Dataset:
    if args.data == "swiss-roll":
        return gen_swiss_roll(args.n, grid=args.grid, noise=args.noise,
                              seed=args.seed)
    if args.data == "chars":
        if args.corpus is None:
            raise D3PMError("--data chars needs --corpus FILE")
        return load_char_corpus(args.corpus, chunk_len=args.chunk_len,
                                num_categories=args.K)
    return gen_synthetic(args.n, args.K, args.D, seed=args.seed)


def _full_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _meta(args, **extra) -> dict:
    meta = {"config_hash": config_hash(_full_config(args)),
            "seed": getattr(args, "seed", None)}
    meta.update(extra)
    return meta


# --- subcommands ------------------------------------------------------------

def cmd_schedule_inspect(args) -> int:
    spec = _build_spec(args)
    batch = _build_dataset(args).records if args.schedule == "mi" else None
    sched = _build_schedule(args, spec, batch)
    proc = ForwardProcess(spec, sched)
    p0 = estimate_marginal(batch, spec.num_categories) if batch is not None \
        else spec.stationary()
    rows = []
    keep = sched.keep_prods()
    for t in range(1, sched.num_steps + 1):
        abar = sched.alpha_bars[t - 1] if sched.alpha_bars is not None else ""
        frac = mi_fraction(proc.qbar_mat(t), p0)
        rows.append([t, sched.beta(t), abar, keep[t], frac])
    columns = ["t", "beta", "alpha_bar", "keep_prod", "mi_fraction"]
    if args.out:
        write_csv(args.out, rows, columns, header_meta=_meta(args))
    else:
        print(",".join(columns))
        for row in rows:
            print(",".join(str(v) for v in row))
    return 0


def cmd_corrupt(args) -> int:
    dataset = _build_dataset(args)
    spec = _build_spec(args)
    sched = _build_schedule(args, spec, dataset.records)
    proc = ForwardProcess(spec, sched)
    ts = [int(v) for v in args.t.split(",")]
    frames = []
    for t in ts:
        corrupted = proc.sample_forward(dataset.records, t, seed=args.seed + t)
        for row in corrupted.data:
            frames.append([t] + list(row))
    columns = ["t"] + [f"x{d}" for d in range(dataset.seq_len)]
    write_csv(args.out, frames, columns,
              header_meta=_meta(args, schedule_hash=config_hash(sched.to_json_dict()),
                                t=args.t, K=spec.num_categories))
    return 0


def cmd_train(args) -> int:
    dataset = _build_dataset(args)
    spec = _build_spec(args)
    sched = _build_schedule(args, spec, dataset.records)
    proc = ForwardProcess(spec, sched)
    config = DenoiserConfig(num_categories=spec.num_categories,
                            seq_len=dataset.seq_len, hidden=args.hidden,
                            depth=args.depth, time_dim=args.time_dim,
                            head=args.head)
    model = MicroDenoiser.create(config, seed=args.seed)
    opt = Adam(args.lr) if args.optimizer == "adam" else \
        SGD(args.lr, momentum=args.momentum)
    rng = rng_from_seed(args.seed + 1)
    X = dataset.records.data
    log_rows = []
    for step in range(args.steps):
        rows = X[rng.integers(0, X.shape[0], size=min(args.batch_size, X.shape[0]))]
        report = train_step(model, rows, proc, opt, lam=args.lam, rng=rng,
                            shared_t=args.shared_t)
        log_rows.append([step, report.total_vb, report.total_hybrid,
                         report.aux_ce, report.bits_per_dim])
        if args.log_every and step % args.log_every == 0:
            print(f"step {step}: vb={report.total_vb:.4f} nats "
                  f"({report.bits_per_dim:.4f} bits/dim)", file=sys.stderr)
    save_checkpoint(args.out, model.params, spec, sched, seed=args.seed,
                    step=args.steps,
                    extra={"hidden": args.hidden, "depth": args.depth,
                           "time_dim": args.time_dim, "head": args.head,
                           "lam": args.lam})
    if args.log:
        write_csv(args.log, log_rows,
                  ["step", "total_vb", "total_hybrid", "aux_ce", "bits_per_dim"],
                  header_meta=_meta(args))
    return 0


def _restore(path):
    params, spec, sched, meta = load_checkpoint(path)
    seq_len = params["b_out"].shape[0] // (
        2 if meta.get("head") == "logistic" else spec.num_categories)
    config = DenoiserConfig(num_categories=spec.num_categories, seq_len=seq_len,
                            hidden=int(meta.get("hidden", 128)),
                            depth=int(meta.get("depth", 2)),
                            time_dim=int(meta.get("time_dim", 32)),
                            head=meta.get("head", "logits"))
    model = MicroDenoiser(config, params, init_seed=int(meta.get("seed", 0)))
    return model, ForwardProcess(spec, sched), meta


def cmd_sample(args) -> int:
    model, proc, meta = _restore(args.checkpoint)
    if args.steps:
        steps = [int(v) for v in args.steps.split(",")]
    else:
        steps = reverse_step_grid(proc.T, args.num_steps)
    result = ancestral_sample(model, proc, model.config.seq_len, steps,
                              seed=args.seed, batch_size=args.num_samples,
                              final_argmax=args.final_argmax, trace=args.trace)
    header = _meta(args, schedule_hash=config_hash(proc.schedule.to_json_dict()),
                   K=proc.K)
    if args.trace:
        batch, frames = result
        rows = [[t] + list(row) for t, frame in frames for row in frame]
        write_csv(args.out, rows,
                  ["t"] + [f"x{d}" for d in range(model.config.seq_len)],
                  header_meta=header)
    else:
        batch_to_csv(args.out, result, meta=header)
    return 0


def cmd_eval_nll(args) -> int:
    model, proc, meta = _restore(args.checkpoint)
    args.K = proc.K
    dataset = _build_dataset(args)
    if args.max_rows and dataset.records.batch_size > args.max_rows:
        batch = SequenceBatch(dataset.records.data[:args.max_rows], proc.K)
    else:
        batch = dataset.records
    mode = "exact" if proc.K ** batch.seq_len <= 4096 else "positionwise"
    report = vb_terms(batch, model, proc, mode=mode,
                      rng=None if mode == "exact" else args.seed,
                      lam=float(meta.get("lam", 0.0)))
    unit = "bits/char" if args.data == "chars" else "bits/dim"
    payload = {"mode": mode, "total_vb_nats": report.total_vb,
               "l_T_nats": report.l_T, "l_0_nats": report.l_0,
               "aux_ce_nats": report.aux_ce, "bits_per_dim": report.bits_per_dim,
               "unit": unit, "config_hash": config_hash(_full_config(args))}
    print(f"{report.bits_per_dim:.4f} {unit} ({mode} mode)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(seed=args.seed)
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 1


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d3pm",
        description="Structured categorical corruption processes and "
                    "discrete-state diffusion models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sched = sub.add_parser("schedule", help="schedule tools")
    sched_sub = p_sched.add_subparsers(dest="subcommand", required=True)
    p_inspect = sched_sub.add_parser(
        "inspect", help="print the beta/alpha-bar table and the "
                        "information-destruction curve as CSV")
    _add_spec_flags(p_inspect)
    _add_schedule_flags(p_inspect)
    _add_data_flags(p_inspect)
    p_inspect.add_argument("--seed", type=int, default=0)
    p_inspect.add_argument("--out", default=None)
    p_inspect.set_defaults(func=cmd_schedule_inspect)

    p_corrupt = sub.add_parser("corrupt", help="emit corrupted batches as CSV frames")
    _add_spec_flags(p_corrupt)
    _add_schedule_flags(p_corrupt)
    _add_data_flags(p_corrupt)
    p_corrupt.add_argument("--t", required=True,
                           help="timestep(s), comma separated")
    p_corrupt.add_argument("--seed", type=int, default=0)
    p_corrupt.add_argument("--out", required=True)
    p_corrupt.set_defaults(func=cmd_corrupt)

    p_train = sub.add_parser("train", help="train the micro-denoiser")
    _add_spec_flags(p_train)
    _add_schedule_flags(p_train)
    _add_data_flags(p_train)
    p_train.add_argument("--steps", type=int, default=2000, help="training steps")
    p_train.add_argument("--batch-size", type=int, default=128)
    p_train.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.0)
    p_train.add_argument("--hidden", type=int, default=128)
    p_train.add_argument("--depth", type=int, default=2)
    p_train.add_argument("--time-dim", type=int, default=32)
    p_train.add_argument("--head", default="logits", choices=["logits", "logistic"])
    p_train.add_argument("--optimizer", default="sgd", choices=["sgd", "adam"])
    p_train.add_argument("--lr", type=float, default=0.05)
    p_train.add_argument("--momentum", type=float, default=0.9)
    p_train.add_argument("--shared-t", action="store_true",
                         help="one shared timestep per minibatch")
    p_train.add_argument("--log-every", type=int, default=0)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="checkpoint path")
    p_train.add_argument("--log", default=None, help="per-step loss CSV")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="ancestral sampling from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--num-samples", type=int, default=100)
    p_sample.add_argument("--steps", default=None,
                          help="explicit step list, e.g. 100,80,...,0")
    p_sample.add_argument("--num-steps", type=int, default=None,
                          help="evenly subsampled reverse step count")
    p_sample.add_argument("--final-argmax", action="store_true",
                          help="decode the final hop deterministically")
    p_sample.add_argument("--trace", action="store_true",
                          help="emit intermediate frames")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True)
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval-nll", help="bound on NLL in bits per dimension")
    p_eval.add_argument("--checkpoint", required=True)
    _add_data_flags(p_eval)
    p_eval.add_argument("--max-rows", type=int, default=0,
                        help="cap on evaluated rows (0 = all)")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None, help="JSON report path")
    p_eval.set_defaults(func=cmd_eval_nll)

    p_verify = sub.add_parser("verify", help="run the oracle suites")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except D3PMError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
