"""Joint adapter training: next-item cross-entropy plus weighted MMD alignment.

Only the adapter tensors (and the prediction head unless ``freeze_head``)
receive updates; the ID model and backbone are frozen before the first step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapter import AdapterParams, median_bandwidth
from .backbone import BackboneParams, Tokenizer
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import ItemCatalog, SplitDataset, expand_subsequences, length_buckets
from .id_model import IdModelParams
from .metrics import hit_rate_at_k, ndcg_at_k
from .model import ModelStack, build_stack, rank_cases, total_loss
from .optim import AdamW, linear_decay

log = logging.getLogger(__name__)


def training_examples(split: SplitDataset, max_seq_len: int) -> list[tuple[tuple[int, ...], int]]:
    pairs = []
    for uid in sorted(split.train):
        pairs.extend(expand_subsequences(split.train[uid], max_seq_len))
    return pairs


def step(stack: ModelStack, batch, opt: AdamW, lr_t: float, lam: float, rho: float) -> dict:
    """One optimizer update on a batch; returns the logged loss values."""
    opt.zero_grad()
    parts = total_loss(stack, batch, lam=lam, rho=rho)
    value = float(parts.total.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"training loss became {value}")
    ad.backward(parts.total)
    opt.step(lr_t)
    rec = {"L": value, "L_p": float(parts.prediction.data), "lr": lr_t}
    if parts.alignment is not None:
        rec["L_m"] = float(parts.alignment.data)
    return rec


def validate(stack: ModelStack, split: SplitDataset, k: int = 5) -> dict[str, float]:
    results = rank_cases(stack, split.validation, k=k)
    return {f"HR@{k}": hit_rate_at_k(results, k), f"N@{k}": ndcg_at_k(results, k)}


@dataclass
class TrainResult:
    history: list[dict]
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: tuple[float, float] = (-1.0, -1.0)
    stopped_early: bool = False
    rho: float = 1.0


def resolve_rho(stack: ModelStack, examples, sample: int = 64) -> float:
    cfg = stack.config
    if cfg.bandwidth == "fixed":
        return cfg.rho
    hist = [h for h, _ in examples[:sample]]
    with ad.no_grad():
        from .model import forward_batch

        D = np.concatenate([forward_batch(stack, [h]).prefixes[0].data[0] for h in hist])
    H = np.concatenate([stack.clean_rows(h)[0] for h in hist])
    return median_bandwidth(D, H)


def train(stack: ModelStack, split: SplitDataset, max_steps: int | None = None,
          log_path=None, validate_every_epoch: bool = True) -> TrainResult:
    """Epoch loop over expanded subsequences with linear LR decay and early stopping.

    Validation HR@5 (ties broken by N@5) selects the best epoch, whose
    parameters are restored at the end. ``max_steps`` truncates the run
    (the schedule still spans the full planned length).
    """
    cfg = stack.config
    lam = cfg.effective_lam
    examples = training_examples(split, cfg.max_seq_len)
    if not examples:
        raise ValueError("no training examples")
    rng = np.random.default_rng(cfg.seed)
    n_batches = len(length_buckets(examples, cfg.batch_size, key=lambda e: stack.token_length(e[0])))
    total_steps = cfg.epochs * n_batches
    opt = AdamW(stack.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rho = resolve_rho(stack, examples)
    result = TrainResult(history=[], rho=rho)
    best_state = None
    stale = 0
    step_no = 0
    log_fh = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            batches = length_buckets(examples, cfg.batch_size, key=lambda e: stack.token_length(e[0]), rng=rng)
            sums: dict[str, float] = {}
            count = 0
            for batch in batches:
                if max_steps is not None and step_no >= max_steps:
                    break
                lr_t = linear_decay(step_no, total_steps, cfg.lr)
                rec = {"step": step_no, **step(stack, batch, opt, lr_t, lam, rho)}
                result.steps.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                for key in ("L", "L_p", "L_m"):
                    if key in rec:
                        sums[key] = sums.get(key, 0.0) + rec[key]
                count += 1
                step_no += 1
            if count == 0:
                break
            entry = {"epoch": epoch, **{k: v / count for k, v in sums.items()}}
            if validate_every_epoch and split.validation:
                val = validate(stack, split)
                entry.update({f"val_{k}": v for k, v in val.items()})
                score = (val["HR@5"], val["N@5"])
                if score > result.best_val:
                    result.best_val, result.best_epoch = score, epoch
                    best_state = {id(t): t.data.copy() for t in stack.trainable()}
                    stale = 0
                else:
                    stale += 1
            result.history.append(entry)
            log.info("epoch %d: %s", epoch, entry)
            if validate_every_epoch and stale >= cfg.patience:
                result.stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        for t in stack.trainable():
            t.data = best_state[id(t)]
    return result


# ---------------------------------------------------------------------------
# checkpoints of the assembled model
# ---------------------------------------------------------------------------

def id_model_metadata(params: IdModelParams) -> dict:
    return {"n_items": params.n_items, "dim": params.dim, "encoder": params.encoder,
            "max_seq_len": params.max_seq_len}


def save_id_model(path, params: IdModelParams, extra: dict | None = None) -> None:
    meta = {"kind": "id_model", "id_model": id_model_metadata(params), **(extra or {})}
    save_checkpoint(path, {t.name: t.data for t in params.parameters()}, meta)


def load_id_model(path) -> IdModelParams:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("id_model", "stack"):
        raise CheckpointError(f"{path} is not an ID-model checkpoint")
    m = meta["id_model"]
    params = IdModelParams.init(m["n_items"], m["dim"], m["encoder"], m["max_seq_len"])
    _fill(params.tensors, tensors, path)
    params.freeze()
    return params


def save_backbone(path, params: BackboneParams, tokenizer: Tokenizer) -> None:
    meta = {"kind": "backbone", "backbone": _backbone_meta(params), "vocab": tokenizer.tokens}
    save_checkpoint(path, {t.name: t.data for t in params.parameters()}, meta)


def load_backbone(path) -> tuple[BackboneParams, Tokenizer]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("backbone", "stack"):
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    b = meta["backbone"]
    params = BackboneParams.init(b["vocab_size"], b["dim"], b["n_layers"], b["max_context"],
                                 b["ffn_mult"], b["use_positions"])
    _fill(params.tensors, tensors, path)
    params.freeze()
    return params, Tokenizer(meta["vocab"])


def _backbone_meta(params: BackboneParams) -> dict:
    return {"vocab_size": params.vocab_size, "dim": params.dim, "n_layers": params.n_layers,
            "max_context": params.max_context, "ffn_mult": params.ffn_mult,
            "use_positions": params.use_positions}


def _fill(target: dict, source: dict, path) -> None:
    for t in target.values():
        if t.name not in source:
            raise CheckpointError(f"{path}: missing tensor {t.name!r}")
        if source[t.name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {t.name!r} has shape {source[t.name].shape}, expected {t.shape}")
        t.data = source[t.name].astype(t.data.dtype)


def save_stack(path, stack: ModelStack, extra: dict | None = None) -> None:
    meta = {
        "kind": "stack",
        "config": stack.config.to_dict(),
        "id_model": id_model_metadata(stack.id_params),
        "backbone": _backbone_meta(stack.backbone),
        "vocab": stack.tokenizer.tokens,
        "n_items": stack.n_items,
        **(extra or {}),
    }
    save_checkpoint(path, stack.all_tensors(), meta)


def load_stack(path, catalog: ItemCatalog) -> tuple[ModelStack, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "stack":
        raise CheckpointError(f"{path} is not a full-model checkpoint")
    if meta["n_items"] != catalog.size:
        raise CheckpointError(f"{path} was trained on {meta['n_items']} items; dataset has {catalog.size}")
    config = RunConfig.from_dict(meta["config"])
    m = meta["id_model"]
    id_params = IdModelParams.init(m["n_items"], m["dim"], m["encoder"], m["max_seq_len"])
    _fill(id_params.tensors, tensors, path)
    b = meta["backbone"]
    backbone = BackboneParams.init(b["vocab_size"], b["dim"], b["n_layers"], b["max_context"],
                                   b["ffn_mult"], b["use_positions"])
    _fill(backbone.tensors, tensors, path)
    stack = build_stack(config, catalog, id_params, backbone, Tokenizer(meta["vocab"]))
    _fill(stack.adapter.tensors, tensors, path)
    _fill({"head": stack.head}, tensors, path)
    return stack, meta


def adapter_param_count(adapter: AdapterParams) -> dict[str, int]:
    return {"triples": adapter.count("W_u") + adapter.count("b_u") + adapter.count("C"),
            "total": adapter.count()}
