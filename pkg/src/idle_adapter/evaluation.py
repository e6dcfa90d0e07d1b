"""Leave-one-out evaluation, the ablation harness and embedding dumps."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapter import build_prefixes
from .autodiff import Tensor
from .backbone import BackboneParams, Tokenizer
from .config import RunConfig
from .dataset import ItemCatalog, SplitDataset
from .id_model import IdModelParams
from .metrics import metric_table
from .model import ModelStack, build_stack, rank_cases
from .trainer import adapter_param_count, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    ("full", "none"),
    ("w/o LayerWise", "layerwise"),
    ("w/o Refinement", "refinement"),
    ("w/o Distribution", "distribution"),
)


def evaluate_model(stack: ModelStack, split: SplitDataset, ks: Sequence[int] = (5, 10),
                   mode: str = "test") -> dict:
    """HR@K and N@K over the test (or validation) cases, ranking the full catalog."""
    if mode not in ("test", "validation"):
        raise ValueError("mode must be 'test' or 'validation'")
    cases = split.test if mode == "test" else split.validation
    results = rank_cases(stack, cases, k=max(ks))
    return {"mode": mode, "users": len(results), **metric_table(results, ks)}


def ablation_run(split: SplitDataset, catalog: ItemCatalog, config: RunConfig, id_params: IdModelParams,
                 backbone: BackboneParams | None = None, tokenizer: Tokenizer | None = None,
                 variants=ABLATION_VARIANTS, ks: Sequence[int] = (5, 10)) -> list[dict]:
    """Train and test the full model and each ablated variant under one seed."""
    tokenizer = tokenizer or Tokenizer.for_catalog(catalog, config.template)
    if backbone is None:
        backbone = build_stack(config, catalog, id_params, tokenizer=tokenizer).backbone
    rows = []
    for label, ablation in variants:
        cfg = config.updated(ablation=ablation)
        stack = build_stack(cfg, catalog, id_params, backbone, tokenizer)
        result = train(stack, split)
        metrics = evaluate_model(stack, split, ks)
        counts = adapter_param_count(stack.adapter)
        rows.append({
            "variant": label,
            "ablation": ablation,
            **{k: v for k, v in metrics.items() if "@" in k},
            "adapter_params": counts["total"],
            "triple_params": counts["triples"],
            "logs_alignment": any("L_m" in s for s in result.steps),
            "best_epoch": result.best_epoch,
            "digest": stack.frozen_digest(),
        })
        log.info("ablation %s: %s", label, metrics)
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def embedding_rows(stack: ModelStack, histories: dict[int, Sequence[int]]) -> list[tuple[str, int, np.ndarray]]:
    """Layer-averaged representations per user from the three sources.

    ``id_base`` is the projected user vector, ``adapter`` the refined virtual
    tokens and ``llm`` the clean normalised hidden rows, all in the backbone width.
    """
    rows = {"id_base": [], "adapter": [], "llm": []}
    with ad.no_grad():
        for uid, hist in sorted(histories.items()):
            _, u = stack.prepare(hist)
            bundle = build_prefixes(Tensor(u), stack.adapter, detail=True)
            rows["id_base"].append((uid, np.mean([p.data for p in bundle.projected], axis=0)))
            rows["adapter"].append((uid, np.mean([d.data.mean(axis=0) for d in bundle.prefixes], axis=0)))
            rows["llm"].append((uid, np.mean([x.mean(axis=0) for x in stack.clean_rows(hist)], axis=0)))
    return [(src, uid, vec) for src in ("id_base", "adapter", "llm") for uid, vec in rows[src]]


def dump_embeddings(stack: ModelStack, histories: dict[int, Sequence[int]], path) -> int:
    """Write ``source,user_id,dim_0..dim_{d'-1}`` rows; returns the number of data rows."""
    rows = embedding_rows(stack, histories)
    dim = stack.backbone.dim
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "user_id"] + [f"dim_{i}" for i in range(dim)])
        for src, uid, vec in rows:
            w.writerow([src, uid] + [repr(float(x)) for x in vec])
    return len(rows)


def centroid_position(rows) -> float:
    """Where the adapter centroid projects on the segment id_base -> llm (0 = id_base, 1 = llm)."""
    cent = {}
    for src in ("id_base", "adapter", "llm"):
        cent[src] = np.mean([v for s, _, v in rows if s == src], axis=0)
    axis = cent["llm"] - cent["id_base"]
    return float(np.dot(cent["adapter"] - cent["id_base"], axis) / np.dot(axis, axis))
