"""Command-line entry point: train, evaluate, ablate, export-intents, bench, synth."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATIONS, VARIANTS, TrainConfig, parse_config
from .errors import BigcfError, DataError, NumericError
from .evaluation import evaluate, evaluate_by_bucket, export_intent_scores
from .graphdata import (InteractionDataset, build_normalized_adjacency, load_dataset,
                        sparsity_buckets, split_per_user, write_dataset)
from .synthetic import make_desk_dataset
from .training import (BatchSampler, final_embeddings, fit, init_params, seed_streams,
                       test_metrics, train_epoch)

log = logging.getLogger("bigcf")

# flag name -> config key
CONFIG_FLAGS = {
    "seed": int, "epochs": int, "lr": float, "batch_size": int, "dim": int, "layers": int,
    "intents": int, "kappa": float, "tau": float, "lambda1": float, "lambda2": float,
    "kl_weight": float, "variant": str, "noise_mode": str, "train_noise": str,
    "patience": int, "eval_every": int, "val_fraction": float, "dtype": str,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_data(p, required=True):
    p.add_argument("--train-file", required=required)
    p.add_argument("--test-file")


def _add_config(p):
    p.add_argument("--config", help="key=value config file")
    for name, kind in CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=kind, default=None,
                       choices=VARIANTS if name == "variant" else None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bigcf", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model and save its best checkpoint")
    _add_data(p)
    _add_config(p)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--out", help="write the per-epoch log here")

    p = sub.add_parser("evaluate", help="Recall/NDCG of a checkpoint, overall and by sparsity")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topk", type=int, nargs="+", default=[20, 40])
    p.add_argument("--noise-mode", choices=("sample", "zero", "one"))
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate", help="train the full model and its six ablations")
    _add_data(p)
    _add_config(p)
    p.add_argument("--out", help="write the comparison table here")

    p = sub.add_parser("export-intents", help="per-user intent correlation scores as CSV")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, help="random users to export (default: all)")
    p.add_argument("--users", type=int, nargs="+")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("bench", help="epoch wall time at |E| and 2|E|")
    _add_data(p, required=False)
    _add_config(p)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("synth", help="write a synthetic desk-scale dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items", type=int, default=1700)
    p.add_argument("--interactions", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=7)
    return ap


def _config(args) -> TrainConfig:
    flags = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    return parse_config(flags, args.config)


def _dataset(args, seed=2024):
    return load_dataset(args.train_file, args.test_file, seed=seed)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg.seed)
    print("# effective config\n" + cfg.echo())
    print("# data " + ds.summary())
    out = open(args.out, "w", encoding="utf-8") if args.out else None

    def emit(rec):
        line = rec.line(cfg.topk)
        print(line, flush=True)
        if out:
            out.write(line + "\n")
            out.flush()

    try:
        result = fit(ds, cfg, on_epoch=emit)
    except NumericError as exc:
        if exc.last_good is not None:
            save_checkpoint(args.checkpoint, exc.last_good.checkpoint)
            print(f"numeric failure; last good parameters saved to {args.checkpoint}",
                  file=sys.stderr)
        raise
    finally:
        if out:
            out.close()
    save_checkpoint(args.checkpoint, result.checkpoint)
    m = test_metrics(result, ds)
    print(f"# best epoch {result.best_epoch}; test metrics")
    print(m.table(cfg.variant))
    return 0


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    ds = _dataset(args, args.seed if args.seed is not None else ck.config.seed)
    if (ds.num_users, ds.num_items) != (ck.num_users, ck.num_items):
        raise DataError(f"checkpoint is for {ck.num_users} users x {ck.num_items} items, "
                        f"dataset has {ds.num_users} x {ds.num_items}")
    adj = build_normalized_adjacency(ds)
    ue, ie = final_embeddings(ck.params, adj, ds.num_users, ck.config, args.noise_mode)
    rep = evaluate(ds, ue, ie, ks=args.topk)
    rep.buckets = evaluate_by_bucket(ds, ue, ie, sparsity_buckets(ds), ks=args.topk)
    print(rep.table(ck.config.variant))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg.seed)
    rows = []
    for variant in ABLATIONS:
        t0 = time.perf_counter()
        v_cfg = cfg.replace(variant=variant)
        result = fit(ds, v_cfg)
        m = test_metrics(result, ds)
        rows.append((variant, m, time.perf_counter() - t0))
        log.info("%s done in %.1fs", variant, rows[-1][2])
    head = f"{'variant':10s} {'R@20':>7s} {'N@20':>7s} {'R@40':>7s} {'N@40':>7s} {'secs':>7s}"
    lines = [head] + [f"{v:10s} {m.recall[20]:7.4f} {m.ndcg[20]:7.4f} {m.recall[40]:7.4f} "
                      f"{m.ndcg[40]:7.4f} {secs:7.1f}" for v, m, secs in rows]
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_export(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    ds = _dataset(args, ck.config.seed)
    if (ds.num_users, ds.num_items) != (ck.num_users, ck.num_items):
        raise DataError("checkpoint and dataset dimensions differ")
    adj = build_normalized_adjacency(ds)
    seed = args.seed if args.seed is not None else ck.config.seed
    exp = export_intent_scores(ck.params, adj, ds.num_users, ck.config, users=args.users,
                               sample=args.sample, rng=np.random.default_rng(seed))
    exp.write_csv(args.out)
    print(f"wrote {len(exp.users)} rows to {args.out}; "
          f"median variance {np.median(exp.variance):.3e}")
    return 0


def bench_scaling(ds, cfg: TrainConfig, repeats: int = 3) -> tuple[int, float, int, float]:
    """Median epoch seconds on half of each user's train edges and on all of them.

    The node set is the same in both runs, so only |E| changes. Returns
    ``(edges_half, secs_half, edges_full, secs_full)``.
    """
    half = split_per_user(ds, 0.5, np.random.default_rng(cfg.seed))
    half = InteractionDataset(ds.num_users, ds.num_items, half.train, ds.test)
    out = []
    for data in (half, ds):
        adj = build_normalized_adjacency(data)
        streams = seed_streams(cfg.seed)
        params = init_params(cfg, data.num_users, data.num_items, streams["init"])
        sampler = BatchSampler(data)
        train_epoch(data, adj, params, cfg, streams["train"], sampler)  # warm-up
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            train_epoch(data, adj, params, cfg, streams["train"], sampler)
            runs.append(time.perf_counter() - t0)
        out += [data.num_train, float(np.median(runs))]
    return tuple(out)


def cmd_bench(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg.seed) if args.train_file else make_desk_dataset(seed=cfg.seed)
    e1, t1, e2, t2 = bench_scaling(ds, cfg, args.repeats)
    print(f"|E|={e1} epoch {t1:.3f}s; |E|={e2} epoch {t2:.3f}s; "
          f"edge ratio {e2 / e1:.2f}; time ratio {t2 / t1:.2f}")
    return 0


def cmd_synth(args) -> int:
    ds = make_desk_dataset(args.users, args.items, args.interactions, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "train.txt", out / "test.txt")
    print(f"wrote {out / 'train.txt'} and {out / 'test.txt'}: {ds.summary()}")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "export-intents": cmd_export, "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BigcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
