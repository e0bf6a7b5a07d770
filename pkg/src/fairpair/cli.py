"""Command-line interface.

Subcommands: synth, eval, analyze, train-toy, grad-check, convert.
Progress goes to stderr; stdout carries machine-readable JSON only.  Exit
codes are a stable contract: 0 ok, 2 bad configuration, 3 I/O or format
problem, 4 degenerate data (e.g. no negative pairs), 5 training divergence
(grad-check additionally exits 1 when the check itself fails).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DegenerateDataError, DivergenceError,
                     DomainError, FormatError, PairingError, ValidationError)
from .metrics import (EvalConfig, dumps_stable, evaluate_dataset,
                      intra_inter_similarity, write_histogram_csv,
                      write_per_identity_csv)
from .model import grad_check, save_model
from .pairwise import DEFAULT_TILE
from .store import load_csv, load_dataset, mean_vectors, save_csv, save_dataset
from .synth import (gen_population, gen_training_set, parse_profile, seeded_rng,
                    split_by_identity)
from .train import (TrainConfig, encode_dataset, parse_train_config, save_trace,
                    scaled_decay_epochs, train)

WORKERS_ENV = "FAIRPAIR_WORKERS"


def _progress(msg: str) -> None:
    print(f"[fairpair] {msg}", file=sys.stderr, flush=True)


def _emit(doc: dict) -> None:
    sys.stdout.write(dumps_stable(doc) + "\n")


def _resolve_workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        w = args.workers
    elif os.environ.get(WORKERS_ENV):
        try:
            w = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, "
                              f"got {os.environ[WORKERS_ENV]!r}")
    else:
        w = 1
    if w < 1:
        raise ConfigError("worker count must be at least 1")
    return w


def _read_text(path, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file not found: {path}")
    return p.read_text()


def _load_ffeb(path):
    if not Path(path).exists():
        raise FormatError(f"input file not found: {path}")
    return load_dataset(path)


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    profile = parse_profile(_read_text(args.profile, "profile"))
    if args.raw_dim is not None:
        _progress(f"generating raw training set (d_in={args.raw_dim}, seed={args.seed})")
        ts = gen_training_set(profile, args.raw_dim, args.seed)
        dataset = ts.to_embedding_set()
    else:
        _progress(f"generating embedding population (d={profile.dim}, seed={args.seed})")
        dataset, _ = gen_population(profile, args.seed)
    save_dataset(args.out, dataset)
    _emit({"out": str(args.out), "n": dataset.n, "d": dataset.dim,
           "g": dataset.n_identities, "m": dataset.n_attributes,
           "hash": dataset.content_hash()})
    return 0


def _write_report(report, out_dir: Path, dataset) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = np.bincount(dataset.identity, minlength=dataset.n_identities)
    report.per_identity_csv_path = "per_identity.csv"
    write_per_identity_csv(out_dir / "per_identity.csv", dataset, report.identities,
                           report.s_intra, report.s_inter, counts)
    write_histogram_csv(out_dir / "hist_intra.csv", report.intra_hist)
    write_histogram_csv(out_dir / "hist_inter.csv", report.inter_hist)
    (out_dir / "report.json").write_text(report.to_json() + "\n")


def _eval_config(args, workers) -> EvalConfig:
    if args.target_fpr <= 0 or args.target_fpr > 1:
        raise ConfigError("target FPR must lie in (0, 1]")
    if args.k < 1:
        raise ConfigError("K must be at least 1")
    if args.bins < 2:
        raise ConfigError("histogram bins must be at least 2")
    return EvalConfig(target_fpr=args.target_fpr, k=args.k, bins=args.bins,
                      tile=args.tile, workers=workers)


def cmd_eval(args) -> int:
    workers = _resolve_workers(args)
    dataset = _load_ffeb(args.input)
    _progress(f"loaded {dataset.n} x {dataset.dim} "
              f"({dataset.n_identities} identities, {dataset.n_attributes} attributes)")
    report = evaluate_dataset(dataset, _eval_config(args, workers), progress=_progress)
    _write_report(report, Path(args.out_dir), dataset)
    _progress(f"report written to {args.out_dir}")
    _emit(report.to_json_dict())
    return 0


def cmd_analyze(args) -> int:
    dataset = _load_ffeb(args.input)
    k = args.k
    if k < 1:
        raise ConfigError("K must be at least 1")
    clamped = min(k, dataset.n_identities - 1)
    if clamped != k:
        _progress(f"K clamped from {k} to {clamped}")
    means = mean_vectors(dataset)
    s_intra, s_inter = intra_inter_similarity(dataset, means, clamped)
    ident_attr = dataset.identity_attribute()
    if args.out:
        import csv as _csv
        with open(args.out, "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(["identity", "name", "attribute", "attribute_name",
                        "s_intra", "s_inter"])
            for i in range(dataset.n_identities):
                w.writerow([i, dataset.labels.identities[i], int(ident_attr[i]),
                            dataset.labels.attributes[ident_attr[i]],
                            f"{s_intra[i]:.9g}", f"{s_inter[i]:.9g}"])
        _progress(f"per-identity similarity written to {args.out}")
    groups = {}
    for t, name in enumerate(dataset.labels.attributes):
        mask = ident_attr == t
        groups[name] = {"mean_s_intra": float(s_intra[mask].mean()),
                        "mean_s_inter": float(s_inter[mask].mean()),
                        "identities": int(mask.sum())}
    _emit({"k": clamped, "groups": groups,
           "overall": {"mean_s_intra": float(s_intra.mean()),
                       "mean_s_inter": float(s_inter.mean())}})
    return 0


def cmd_train_toy(args) -> int:
    workers = _resolve_workers(args)
    dataset = _load_ffeb(args.data)
    base = parse_train_config(_read_text(args.config, "training config"),
                              d_in=dataset.dim) if args.config else TrainConfig(d_in=dataset.dim)
    cfg_kwargs = dict(base.__dict__)
    cfg_kwargs.update(d_in=dataset.dim, n_id=dataset.n_identities, mode=args.mode)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("lr", "lr"), ("seed", "seed"), ("d_k", "d_k"), ("d_f", "d_f")):
        v = getattr(args, flag)
        if v is not None:
            cfg_kwargs[key] = v
    if args.epochs is not None and cfg_kwargs["decay_epochs"] == scaled_decay_epochs(base.epochs):
        cfg_kwargs["decay_epochs"] = ()  # auto schedule follows the overridden epoch count
    if args.detach_eps:
        cfg_kwargs["detach_eps"] = True
    config = TrainConfig(**cfg_kwargs)

    x = dataset.vectors.astype(np.float64)
    train_idx, eval_idx = split_by_identity(dataset.identity)
    _progress(f"training mode={config.mode} on {len(train_idx)} samples "
              f"({config.epochs} epochs, batch {config.batch_size}, seed {config.seed})")
    params, trace = train(config, x[train_idx], dataset.identity[train_idx])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(out_dir / "model.ffmp", params)
    save_trace(out_dir / "trace.csv", trace)
    _progress(f"trained {trace.iterations} iterations; final loss {trace.loss[-1]:.6g}")

    encoded = encode_dataset(params, x[eval_idx], dataset.identity[eval_idx],
                             dataset.attribute[eval_idx], dataset.labels)
    eval_cfg = EvalConfig(target_fpr=args.eval_target_fpr, k=args.k, bins=args.bins,
                          tile=args.tile, workers=workers)
    report = evaluate_dataset(encoded, eval_cfg, progress=_progress)
    _write_report(report, out_dir, encoded)

    window = min(500, trace.iterations)
    _emit({"mode": config.mode, "iterations": trace.iterations,
           "final_loss": float(trace.loss[-1]),
           "tail_mean_abs_eps": trace.tail_mean_abs_eps(window),
           "tail_window": window,
           "ifpr_std": report.identities.ifpr_std,
           "afpr_std": report.attributes.afpr_std,
           "out_dir": str(out_dir)})
    return 0


def cmd_grad_check(args) -> int:
    rng = seeded_rng(args.seed, 30)
    worst = 0.0
    for i in range(args.configs):
        d_in, d_k, d_f = (int(rng.integers(4, 33)) for _ in range(3))
        n_id = int(rng.integers(4, 17))
        batch = int(rng.integers(4, 13))
        use_eps = bool(i % 3 != 2)           # mix debiased and plain losses
        enc = "softplus" if i % 2 == 0 else "identity"
        deb = "identity" if i % 4 != 3 else "softplus"
        err = grad_check(d_in, d_k, d_f, n_id, batch, rng, step=args.step,
                         use_eps=use_eps, encoder_act=enc, debias_act=deb,
                         negate_analytic=args.negate_analytic)
        worst = max(worst, err)
        _progress(f"config {i + 1}/{args.configs}: d=({d_in},{d_k},{d_f}) "
                  f"n_id={n_id} batch={batch} rel_err={err:.3g}")
    passed = worst < args.tol
    _emit({"configs": args.configs, "step": args.step, "tol": args.tol,
           "max_rel_err": worst, "pass": passed})
    return 0 if passed else 1


def cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.out)
    if src.suffix == ".csv" and dst.suffix == ".ffeb":
        if not src.exists():
            raise FormatError(f"input file not found: {src}")
        dataset = load_csv(src)
        save_dataset(dst, dataset)
    elif src.suffix == ".ffeb" and dst.suffix == ".csv":
        dataset = _load_ffeb(src)
        save_csv(dst, dataset)
    else:
        raise ConfigError(f"cannot convert {src.suffix or '(none)'} to "
                          f"{dst.suffix or '(none)'}; use .csv and .ffeb")
    _emit({"in": str(src), "out": str(dst), "n": dataset.n, "d": dataset.dim,
           "hash": dataset.content_hash()})
    return 0


# ---------------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--workers", type=int, default=None,
                   help=f"similarity worker threads (default ${WORKERS_ENV} or 1)")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE,
                   help="row-block size for the pairwise sweeps")


def _add_eval_flags(p, target_default: float) -> None:
    p.add_argument("--target-fpr", type=float, default=target_default)
    p.add_argument("--k", type=int, default=50,
                   help="closest other-identity means per identity")
    p.add_argument("--bins", type=int, default=200, help="histogram bins")
    _add_common(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairpair",
                                 description="Fairness evaluation for face-recognition "
                                             "embeddings, with a toy debias trainer.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding set")
    p.add_argument("--profile", required=True, help="bias profile key-value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .ffeb path")
    p.add_argument("--raw-dim", type=int, default=None,
                   help="emit a raw (pre-encoder) training set of this dimension")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="full fairness evaluation of an embedding set")
    p.add_argument("--in", dest="input", required=True, help="input .ffeb path")
    p.add_argument("--out-dir", required=True)
    _add_eval_flags(p, 1e-5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="intra/inter similarity analysis only")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--out", default=None, help="optional per-identity CSV path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train-toy", help="train the toy debias model and evaluate it")
    p.add_argument("--data", required=True, help="raw training set (.ffeb)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("mixfair", "cosface"), default="mixfair")
    p.add_argument("--config", default=None, help="training config key-value file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--d-k", type=int, default=None)
    p.add_argument("--d-f", type=int, default=None)
    p.add_argument("--detach-eps", action="store_true",
                   help="stop-gradient ablation for the bias difference")
    p.add_argument("--eval-target-fpr", dest="eval_target_fpr", type=float, default=1e-2,
                   help="target FPR for the post-training eval (toy eval sets "
                        "are too small for the production 1e-5)")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--bins", type=int, default=200)
    _add_common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("grad-check", help="verify analytic gradients against finite differences")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negate-analytic", action="store_true",
                   help=argparse.SUPPRESS)   # test hook: injects a sign-flip bug
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("convert", help="convert between .csv and .ffeb")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fairpair: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ValidationError) as exc:
        print(f"fairpair: input error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"fairpair: i/o error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateDataError, PairingError) as exc:
        print(f"fairpair: degenerate data: {exc}", file=sys.stderr)
        return 4
    except DivergenceError as exc:
        print(f"fairpair: {exc}", file=sys.stderr)
        return 5
    except DomainError as exc:
        print(f"fairpair: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
