import csv
import math

import numpy as np
import pytest

from idle_adapter import evaluation
from idle_adapter.config import RunConfig
from idle_adapter.dataset import generate_synthetic, leave_one_out_split
from idle_adapter.evaluation import (
    ABLATION_VARIANTS,
    ablation_run,
    centroid_position,
    dump_embeddings,
    embedding_rows,
    evaluate_model,
    format_table,
)
from idle_adapter.id_model import IdModelParams
from idle_adapter.metrics import rank_results
from idle_adapter.model import build_stack


def test_oracle_model_scores_perfectly(small_world, monkeypatch):
    seqs, catalog, split, cfg, id_params = small_world
    stack = build_stack(cfg, catalog, id_params)

    def oracle(_stack, cases, k=10):
        scores = np.zeros((len(cases), catalog.size))
        scores[np.arange(len(cases)), [c.target for c in cases]] = 1.0
        return rank_results(scores, [c.target for c in cases], [c.user_id for c in cases], k=k)

    monkeypatch.setattr(evaluation, "rank_cases", oracle)
    m = evaluate_model(stack, split)
    assert m["users"] == len(seqs)
    assert all(m[k] == 1.0 for k in ("HR@5", "N@5", "HR@10", "N@10"))


def test_uniform_model_matches_chance():
    seqs, catalog = generate_synthetic(400, 50, 1, 0.1, seed=9)
    split = leave_one_out_split(seqs)
    cfg = RunConfig(id_dim=8, llm_dim=8, llm_layers=1, max_seq_len=8)
    stack = build_stack(cfg, catalog, IdModelParams.init(50, 8, "attention", 8, seed=0))
    stack.head.data[:] = 0.0
    m = evaluate_model(stack, split)
    p, n = 5 / 50, len(seqs)
    assert abs(m["HR@5"] - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_evaluation_is_repeatable(small_world):
    seqs, catalog, split, cfg, id_params = small_world
    stack = build_stack(cfg, catalog, id_params)
    first = evaluate_model(stack, split)
    stack.clear_cache()
    assert evaluate_model(stack, split) == first
    assert evaluate_model(stack, split, mode="validation")["mode"] == "validation"
    with pytest.raises(ValueError):
        evaluate_model(stack, split, mode="train")


def test_ablation_rows(small_world):
    seqs, catalog, split, cfg, id_params = small_world
    cfg = cfg.updated(epochs=1, llm_layers=3)
    rows = ablation_run(split, catalog, cfg, id_params)
    assert [r["variant"] for r in rows] == [v for v, _ in ABLATION_VARIANTS]
    by = {r["ablation"]: r for r in rows}
    assert not by["distribution"]["logs_alignment"] and by["none"]["logs_alignment"]
    assert by["none"]["triple_params"] == 3 * by["layerwise"]["triple_params"]
    assert by["refinement"]["adapter_params"] < by["none"]["adapter_params"]
    assert len({r["digest"] for r in rows}) == 1
    text = format_table(rows, ["variant", "HR@5"])
    assert text.splitlines()[0].startswith("variant") and len(text.splitlines()) == 6


def test_dump_csv(small_world, tmp_path):
    seqs, catalog, split, cfg, id_params = small_world
    stack = build_stack(cfg, catalog, id_params)
    path = tmp_path / "emb.csv"
    n = dump_embeddings(stack, split.train, path)
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["source", "user_id"] + [f"dim_{i}" for i in range(cfg.llm_dim)]
    assert n == len(rows) - 1 == 3 * len(split.train)
    assert {r[0] for r in rows[1:]} == {"id_base", "adapter", "llm"}
    assert np.all(np.isfinite(np.array([r[2:] for r in rows[1:]], dtype=float)))


def test_centroid_position_geometry():
    rows = [("id_base", 0, np.zeros(2)), ("llm", 0, np.array([2.0, 0.0])), ("adapter", 0, np.array([0.5, 3.0]))]
    assert centroid_position(rows) == 0.25


@pytest.mark.slow
def test_trained_adapter_sits_between_sources(acceptance_run):
    users = dict(list(acceptance_run.split.train.items())[:100])
    pos = centroid_position(embedding_rows(acceptance_run.stack, users))
    assert 0.0 <= pos <= 1.0, pos
