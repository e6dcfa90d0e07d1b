from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from idle_adapter.config import RunConfig
from idle_adapter.dataset import ItemCatalog, generate_synthetic, leave_one_out_split
from idle_adapter.evaluation import evaluate_model
from idle_adapter.id_model import IdModelParams, pretrain
from idle_adapter.model import build_stack
from idle_adapter.trainer import train

WORDS = ("shirt", "coat", "skirt", "sweater", "boots", "scarf", "hat", "gloves", "jacket", "dress")

# configuration shared by every end-to-end acceptance run on the planted corpus
CORPUS = dict(n_users=200, n_items=50, pattern_order=1, noise_rate=0.1, seed=42)
ACCEPTANCE_OVERRIDES = dict(lr=2e-3, lam=1.0, epochs=40)


def tiny_config(**kw) -> RunConfig:
    base = dict(id_dim=4, llm_dim=8, llm_layers=2, prompt_len=2, max_context=16, ffn_mult=2,
                template="history: {titles}", max_seq_len=3, batch_size=2, seed=7)
    base.update(kw)
    return RunConfig(**base)


def tiny_stack(**kw):
    """M=10 single-word catalog, d=4, d'=8, L=2, L'=2; prompts of at most 7 tokens."""
    cfg = tiny_config(**kw)
    catalog = ItemCatalog(list(WORDS))
    id_params = IdModelParams.init(10, cfg.id_dim, cfg.encoder, cfg.max_seq_len, seed=3)
    # a non-trivial ID model so user vectors differ between histories
    rng = np.random.default_rng(11)
    for t in id_params.parameters():
        t.data = rng.normal(0, 0.5, size=t.shape)
    return build_stack(cfg, catalog, id_params)


@pytest.fixture
def stack():
    return tiny_stack()


@pytest.fixture(scope="session")
def small_world():
    """A quick planted corpus with a pretrained ID model, for integration tests."""
    seqs, catalog = generate_synthetic(40, 20, 1, 0.0, seed=5, cycle_len=5, min_len=6, max_len=8)
    split = leave_one_out_split(seqs)
    cfg = RunConfig(id_dim=8, llm_dim=8, llm_layers=2, ffn_mult=2, epochs=2, batch_size=16,
                    pretrain_epochs=3, max_seq_len=6, seed=1)
    pr = pretrain(split, catalog.size, dim=cfg.id_dim, encoder=cfg.encoder, max_seq_len=cfg.max_seq_len,
                  epochs=cfg.pretrain_epochs, seed=cfg.seed)
    return seqs, catalog, split, cfg, pr.params


@dataclass
class AcceptanceRun:
    seqs: list
    catalog: ItemCatalog
    split: object
    config: RunConfig
    id_params: IdModelParams
    stack: object
    result: object
    metrics: dict
    seconds: float


@pytest.fixture(scope="session")
def acceptance_run() -> AcceptanceRun:
    """The full pipeline on the planted corpus: generate, pretrain, train, evaluate."""
    start = time.perf_counter()
    seqs, catalog = generate_synthetic(**CORPUS)
    split = leave_one_out_split(seqs)
    cfg = RunConfig(**ACCEPTANCE_OVERRIDES)
    pr = pretrain(split, catalog.size, dim=cfg.id_dim, encoder=cfg.encoder, max_seq_len=cfg.max_seq_len,
                  epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch_size, lr=cfg.pretrain_lr,
                  seed=cfg.seed)
    stack = build_stack(cfg, catalog, pr.params)
    result = train(stack, split)
    metrics = evaluate_model(stack, split)
    return AcceptanceRun(seqs, catalog, split, cfg, pr.params, stack, result, metrics,
                         time.perf_counter() - start)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
