"""Command-line entry point: generate, pretrain, train, eval, ablate, dump."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

from .backbone import Tokenizer
from .config import ABLATIONS, ConfigError, RunConfig
from .dataset import generate_synthetic, leave_one_out_split, load_interactions, ratio_split, save_jsonl
from .evaluation import ablation_run, dump_embeddings, evaluate_model, format_table
from .id_model import pretrain
from .model import build_stack
from .trainer import load_backbone, load_id_model, load_stack, save_backbone, save_id_model, save_stack, train

log = logging.getLogger("idle_adapter")

METRIC_COLUMNS = ["HR@5", "N@5", "HR@10", "N@10"]

# flag name -> config key
OVERRIDES = {
    "epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "encoder": "encoder",
    "max_seq_len": "max_seq_len", "pooling": "pooling", "rho": "rho", "id_dim": "id_dim",
    "llm_dim": "llm_dim", "llm_layers": "llm_layers", "pretrain_epochs": "pretrain_epochs",
    "patience": "patience", "template": "template",
}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    elif "seed" not in data and os.environ.get("IDLE_SEED"):
        try:
            data["seed"] = int(os.environ["IDLE_SEED"])
        except ValueError:
            raise ConfigError("IDLE_SEED must be an integer") from None
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if getattr(args, "freeze_head", False):
        data["freeze_head"] = True
    if getattr(args, "ablation", None):
        data["ablation"] = args.ablation
    return RunConfig.from_dict(data)


def output_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-s{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def load_split(path, cfg: RunConfig):
    seqs, catalog = load_interactions(path, cfg.min_len, cfg.max_title)
    split = leave_one_out_split(seqs) if cfg.split == "leave_one_out" else ratio_split(seqs, seed=cfg.seed)
    return split, catalog


def need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found at {p}")
    return p


def emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    targets = [out / "dataset.jsonl", out / "vocab.txt"]
    if not args.force and any(t.exists() for t in targets):
        raise CliError(f"{out} already holds a dataset; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    seqs, catalog = generate_synthetic(args.users, args.items, args.order, args.noise, args.seed,
                                       cycle_len=args.cycle_len, min_len=args.min_len, max_len=args.max_len)
    save_jsonl(seqs, catalog, targets[0])
    template = resolve_config(argparse.Namespace(config=args.config, seed=args.seed)).template
    Tokenizer.for_catalog(catalog, template).save(targets[1])
    emit({"dataset": str(targets[0]), "vocab": str(targets[1]), "users": len(seqs), "items": catalog.size})
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    split, catalog = load_split(need_file(args.data, "dataset"), cfg)
    out = output_dir(args, cfg)
    res = pretrain(split, catalog.size, dim=cfg.id_dim, encoder=cfg.encoder, max_seq_len=cfg.max_seq_len,
                   epochs=cfg.pretrain_epochs, steps=args.steps, batch_size=cfg.pretrain_batch_size,
                   lr=cfg.pretrain_lr, seed=cfg.seed)
    with (out / "pretrain_log.jsonl").open("w", encoding="utf-8") as fh:
        for i, loss in enumerate(res.losses):
            fh.write(json.dumps({"step": i, "loss": loss}) + "\n")
    save_id_model(out / "id_model.ckpt", res.params, {"final_loss": res.final_loss})
    emit({"checkpoint": str(out / "id_model.ckpt"), "steps": len(res.losses), "final_loss": res.final_loss})
    return 0


def _stack_parts(args, cfg, catalog, out):
    id_params = load_id_model(need_file(args.id_checkpoint, "ID-model checkpoint"))
    if id_params.n_items != catalog.size:
        raise CliError(f"ID model covers {id_params.n_items} items but the dataset has {catalog.size}")
    if args.backbone:
        backbone, tokenizer = load_backbone(need_file(args.backbone, "backbone checkpoint"))
    else:
        stack = build_stack(cfg, catalog, id_params)
        backbone, tokenizer = stack.backbone, stack.tokenizer
        save_backbone(out / "backbone.ckpt", backbone, tokenizer)
        tokenizer.save(out / "vocab.txt")
    return id_params, backbone, tokenizer


def cmd_train(args) -> int:
    base = resolve_config(args)
    split, catalog = load_split(need_file(args.data, "dataset"), base)
    out = output_dir(args, base)
    id_params, backbone, tokenizer = _stack_parts(args, base, catalog, out)
    lams = args.lam or [base.lam]
    lengths = args.prompt_len or [base.prompt_len]
    rows = []
    for lam, plen in itertools.product(lams, lengths):
        cfg = base.updated(lam=float(lam), prompt_len=int(plen))
        run_dir = out if len(lams) * len(lengths) == 1 else out / f"lam{lam}-len{plen}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")
        stack = build_stack(cfg, catalog, id_params, backbone, tokenizer)
        result = train(stack, split, log_path=run_dir / "train_log.jsonl")
        metrics = evaluate_model(stack, split)
        save_stack(run_dir / "model.ckpt", stack, {"best_epoch": result.best_epoch})
        (run_dir / "history.json").write_text(json.dumps(result.history, indent=1) + "\n", encoding="utf-8")
        (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        row = {"lambda": cfg.effective_lam, "prompt_len": plen, "ablation": cfg.ablation, **metrics,
               "checkpoint": str(run_dir / "model.ckpt")}
        rows.append(row)
        emit(row)
    print(format_table(rows, ["lambda", "prompt_len", "ablation"] + METRIC_COLUMNS))
    return 0


def cmd_eval(args) -> int:
    ckpt = need_file(args.checkpoint, "checkpoint")
    cfg = resolve_config(args)
    split, catalog = load_split(need_file(args.data, "dataset"), cfg)
    stack, _ = load_stack(ckpt, catalog)
    metrics = evaluate_model(stack, split, mode=args.mode)
    emit(metrics)
    print(format_table([metrics], ["mode", "users"] + METRIC_COLUMNS))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    split, catalog = load_split(need_file(args.data, "dataset"), cfg)
    out = output_dir(args, cfg)
    id_params, backbone, tokenizer = _stack_parts(args, cfg, catalog, out)
    rows = ablation_run(split, catalog, cfg, id_params, backbone, tokenizer)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    for row in rows:
        emit(row)
    print(format_table(rows, ["variant"] + METRIC_COLUMNS + ["adapter_params"]))
    return 0


def cmd_dump(args) -> int:
    ckpt = need_file(args.checkpoint, "checkpoint")
    cfg = resolve_config(args)
    split, catalog = load_split(need_file(args.data, "dataset"), cfg)
    stack, _ = load_stack(ckpt, catalog)
    n = dump_embeddings(stack, split.train, args.csv)
    emit({"csv": args.csv, "rows": n})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idle-adapter", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory (default runs/<timestamp>-s<seed>)"):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed (fallback: $IDLE_SEED)")
        p.add_argument("--out", help=out_help)
        for flag in ("epochs", "batch_size", "max_seq_len", "id_dim", "llm_dim", "llm_layers",
                     "pretrain_epochs", "patience"):
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--encoder", choices=["attention", "gru", "last"])
        p.add_argument("--pooling", choices=["last", "mean"])
        p.add_argument("--template")

    g = sub.add_parser("generate", help="write a synthetic planted-pattern dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--users", type=int, default=200)
    g.add_argument("--items", type=int, default=50)
    g.add_argument("--order", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--cycle-len", type=int, default=10)
    g.add_argument("--min-len", type=int, default=8)
    g.add_argument("--max-len", type=int, default=16)
    g.add_argument("--seed", type=int, default=int(os.environ.get("IDLE_SEED", 42)))
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pretrain the ID-based sequential model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train the adapter (optionally sweeping lambda / prompt length)")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--id-checkpoint", required=True)
    t.add_argument("--backbone", help="frozen backbone checkpoint (initialised and saved if omitted)")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--lambda", dest="lam", type=float, nargs="+")
    t.add_argument("--prompt-len", type=int, nargs="+")
    t.add_argument("--freeze-head", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(e, out_help="optional path for the metrics JSON")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["test", "validation"], default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the ablated variants")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--id-checkpoint", required=True)
    a.add_argument("--backbone")
    a.add_argument("--freeze-head", action="store_true")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump", help="write layer-averaged embeddings as CSV")
    common(d)
    d.add_argument("--data", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--csv", required=True)
    d.set_defaults(func=cmd_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report every failure as one parseable line
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
