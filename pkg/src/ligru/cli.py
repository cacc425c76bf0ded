"""Command-line entry point: ``python -m ligru <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime compute error,
4 acceptance-suite (gradient check) failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .cells import CELL_KINDS
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .ctc import CTCInfeasibleError, best_path_decode, map_labels, read_label_map
from .data import (SYNTH_TASKS, ArchiveError, Dataset, gen_synthetic, load_dataset, read_feature_archive,
                   write_feature_archive, write_targets)
from .gradcheck import REL_TOL, run_suite
from .network import StackConfig, log_softmax
from .numeric import ContractError
from .optim import build_batch_plan
from .trainer import LOG_NAME, NonFiniteLossError, Trainer, evaluate, make_batch

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_COMPUTE, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _kv(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _write_summary(path, payload: dict):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    overrides = dict(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = str(args.epochs)
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    return load_config(args.config, overrides)


def _datasets(cfg: RunConfig):
    missing = [k for k in ("train_features", "train_targets") if not getattr(cfg, k)]
    if missing:
        raise ConfigError([f"{k}: required" for k in missing])
    classes = cfg.num_classes or None
    train = load_dataset(cfg.train_features, cfg.train_targets, classes)
    dev = None
    if cfg.dev_features and cfg.dev_targets:
        dev = load_dataset(cfg.dev_features, cfg.dev_targets, classes or train.num_classes)
    return train, dev


def _features_only(path) -> Dataset:
    arch = read_feature_archive(path)
    feats = [np.asarray(f, dtype=np.float64) for _, f in arch.entries]
    targets = [np.zeros(len(f), dtype=np.int64) for f in feats]
    return Dataset(arch.ids, feats, targets, "framewise", 1)


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train, dev = _datasets(cfg)
    out_dir = Path(cfg.out_dir or "run")
    if args.resume:
        trainer = Trainer.resume(args.resume, train, dev, cfg)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / LOG_NAME).write_text("")
        trainer = Trainer(cfg, train, dev)
    (out_dir / "config.txt").write_text(cfg.to_text())
    records = trainer.run(out_dir=out_dir, log=lambda r: print(r.line(), flush=True))
    _write_summary(args.summary, {
        "command": "train",
        "epochs": trainer.epoch,
        "parameters": trainer.net.num_parameters(),
        "best_dev_metric": trainer.best_metric,
        "records": [vars(r) for r in records],
        "log": str(out_dir / LOG_NAME),
        "checkpoint": str(out_dir / "last.ckpt"),
    })
    return EXIT_OK


def _load_net(path):
    net, cfg, _ = Trainer.from_checkpoint(path)
    return net, cfg


def cmd_eval(args) -> int:
    net, cfg = _load_net(args.checkpoint)
    ds = load_dataset(args.features, args.targets, net.num_classes)
    lmap_path = args.label_map or cfg.label_map
    res = evaluate(net, ds, cfg.batch_size, read_label_map(lmap_path) if lmap_path else None)
    print(f"loss\t{res.loss:.6f}\nerror_rate\t{res.error_rate:.6f}\nframes\t{res.frames}")
    _write_summary(args.summary, {"command": "eval", "loss": res.loss, "error_rate": res.error_rate,
                                  "frames": res.frames, **res.extra})
    return EXIT_OK


def cmd_decode(args) -> int:
    net, cfg = _load_net(args.checkpoint)
    ds = _features_only(args.features)
    lmap_path = args.label_map or cfg.label_map
    lmap = read_label_map(lmap_path) if lmap_path else None
    hyps = [None] * len(ds)
    for ids in build_batch_plan(ds.lengths, cfg.batch_size):
        batch, _ = make_batch(ds, ids, net.dtype)
        logits, _ = net.forward(batch, mode="eval")
        lp = log_softmax(logits.astype(np.float64))
        for row, i in enumerate(ids):
            seq = lp[row, :batch.lengths[row]]
            if net.head == "ctc":
                hyp = best_path_decode(seq)
                hyps[i] = map_labels(hyp, lmap) if lmap else hyp
            else:
                hyps[i] = seq.argmax(axis=1).tolist()
    text = "".join(f"{uid} {' '.join(map(str, h))}".rstrip() + "\n" for uid, h in zip(ds.ids, hyps))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    _write_summary(args.summary, {"command": "decode", "utterances": len(ds), "output": args.output})
    return EXIT_OK


def cmd_analyze_gates(args) -> int:
    net, _ = _load_net(args.checkpoint)
    ds = _features_only(args.features)
    rep = analysis.gate_redundancy_report(net, ds, args.max_lag, args.mean_removed, args.layer)
    sys.stdout.write(rep.table())
    print(f"# normalized peak {rep.normalized_peak:.4f} at lag {rep.peak_lag}")
    files = [str(p) for p in rep.write_series(args.out_prefix)] if args.out_prefix else []
    _write_summary(args.summary, {"command": "analyze-gates", **rep.summary(), "series": files})
    return EXIT_OK


def cmd_grad_norms(args) -> int:
    cfg = _run_config(args)
    train, dev = _datasets(cfg)
    trainer = Trainer(cfg, train, dev)
    acc = analysis.gradient_norms(trainer, cfg.epochs)
    sys.stdout.write(acc.table())
    _write_summary(args.summary, {"command": "grad-norms", "epochs": cfg.epochs, "batches": acc.batches,
                                  "per_kind": acc.per_kind(), "per_parameter": acc.per_parameter()})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(args.kinds, range(args.seeds))
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.kind}\tseed={r.seed}\tmax_rel_error={r.worst:.3e}\t{status}")
    print(f"# {len(results) - failed}/{len(results)} within {REL_TOL:g}")
    _write_summary(args.summary, {"command": "grad-check", "checked": len(results), "failed": failed,
                                  "results": [{"kind": r.kind, "seed": r.seed, "max_rel_error": r.worst}
                                              for r in results]})
    return EXIT_OK if failed == 0 else EXIT_ACCEPTANCE


def cmd_param_count(args) -> int:
    bn = {"auto": None, "true": True, "false": False}[args.bn]

    def count(cell):
        sc = StackConfig(cell=cell, layers=args.layers, units=args.units,
                         bidirectional=not args.unidirectional, bn=bn)
        return analysis.param_count(sc, args.input_dim, args.output_dim)

    pc = count(args.cell)
    sys.stdout.write(pc.table())
    gru, light = count("gru").total, count("li-gru").total
    print(f"# gru {gru}  li-gru {light}  ratio li-gru/gru {light / gru:.4f}")
    _write_summary(args.summary, {"command": "param-count", "cell": args.cell, "total": pc.total,
                                  "by_group": pc.by_group(), "head": pc.head, "gru": gru, "li_gru": light,
                                  "ratio": light / gru})
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    params = {}
    for k, v in args.param or []:
        params[k] = float(v) if any(c in v for c in ".e") else int(v)
    splits = gen_synthetic(args.task, args.seed, args.num_train, args.num_dev, **params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, sp in splits.items():
        write_feature_archive(sp.archive, out / f"{name}.lgru")
        write_targets(sp.targets, sp.kind, out / f"{name}.targets")
    sp = splits["train"]
    conf = (f"train_features={out / 'train.lgru'}\ntrain_targets={out / 'train.targets'}\n"
            f"dev_features={out / 'dev.lgru'}\ndev_targets={out / 'dev.targets'}\n"
            f"num_classes={sp.num_classes}\nhead={'ctc' if sp.kind == 'ctc' else 'framewise'}\n")
    (out / "data.conf").write_text(conf)
    print(f"wrote {args.task} to {out} ({args.num_train} train / {args.num_dev} dev, "
          f"{sp.num_classes} classes, dim {sp.archive.dim})")
    _write_summary(args.summary, {"command": "gen-synth", "task": args.task, "out_dir": str(out),
                                  "num_classes": sp.num_classes, "dim": sp.archive.dim})
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ligru", description="Light GRU toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_opts(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--summary", help="write a JSON result summary here")

    sp = sub.add_parser("train", help="train a network")
    run_opts(sp)
    sp.add_argument("--out-dir")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="loss and error rate of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--label-map")
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("decode", help="best-path (CTC) or framewise argmax decoding")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--label-map")
    sp.add_argument("--output")
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("analyze-gates", help="update/reset gate cross-correlation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--max-lag", type=int)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--mean-removed", action="store_true")
    sp.add_argument("--out-prefix", help="write <prefix>.czr.txt and <prefix>.czz.txt")
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_analyze_gates)

    sp = sub.add_parser("grad-norms", help="mean gradient L2 norms while training")
    run_opts(sp)
    sp.set_defaults(func=cmd_grad_norms)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--kinds", nargs="+", choices=CELL_KINDS, default=list(CELL_KINDS))
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("param-count", help="trainable parameter breakdown")
    sp.add_argument("--cell", choices=CELL_KINDS, default="li-gru")
    sp.add_argument("--layers", type=int, default=5)
    sp.add_argument("--units", type=int, default=465)
    sp.add_argument("--input-dim", type=int, default=39)
    sp.add_argument("--output-dim", type=int)
    sp.add_argument("--unidirectional", action="store_true")
    sp.add_argument("--bn", choices=("auto", "true", "false"), default="auto")
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_param_count)

    sp = sub.add_parser("gen-synth", help="write a synthetic task to disk")
    sp.add_argument("--task", choices=SYNTH_TASKS, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--num-train", type=int, default=200)
    sp.add_argument("--num-dev", type=int, default=50)
    sp.add_argument("--param", action="append", type=_kv, metavar="KEY=VALUE", help="task parameter")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--summary")
    sp.set_defaults(func=cmd_gen_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (ContractError, ArchiveError, CheckpointError, CTCInfeasibleError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
