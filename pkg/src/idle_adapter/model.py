"""The assembled model: frozen ID encoder + frozen backbone + trainable adapter and head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import AdapterParams, alignment_loss, build_prefixes
from .autodiff import Tensor
from .backbone import BackboneParams, Tokenizer, build_hard_prompt, forward_clean, forward_with_prefix
from .checkpoint import digest
from .config import RunConfig
from .dataset import ItemCatalog, truncate
from .id_model import IdModelParams, cross_entropy, encode_batch
from .optim import trunc_normal


@dataclass
class ModelStack:
    config: RunConfig
    catalog: ItemCatalog
    tokenizer: Tokenizer
    id_params: IdModelParams
    backbone: BackboneParams
    adapter: AdapterParams
    head: Tensor
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_items(self) -> int:
        return self.catalog.size

    def trainable(self) -> list[Tensor]:
        params = self.adapter.parameters()
        if self.head.requires_grad:
            params.append(self.head)
        return params

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        """Everything that must stay byte-identical during adapter training."""
        out = {t.name: t.data for t in self.backbone.parameters()}
        out.update({t.name: t.data for t in self.id_params.parameters()})
        if not self.head.requires_grad:
            out[self.head.name] = self.head.data
        return out

    def frozen_digest(self) -> str:
        return digest(self.frozen_tensors())

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for group in (self.id_params.parameters(), self.backbone.parameters(), self.adapter.parameters()):
            out.update({t.name: t.data for t in group})
        out[self.head.name] = self.head.data
        return out

    def clear_cache(self) -> None:
        self._cache.clear()

    # -- per-history cached quantities (valid while the frozen parts stay fixed) --
    def prepare(self, history) -> tuple[tuple[int, ...], np.ndarray]:
        """Token ids and user vector for a history, cached by the truncated history."""
        key = truncate(history, self.config.max_seq_len)
        hit = self._cache.get(("prep", key))
        if hit is None:
            prompt = build_hard_prompt(key, self.catalog, self.tokenizer, self.config.template)
            with ad.no_grad():
                u = encode_batch(np.asarray(key)[None, :], self.id_params).data[0]
            hit = (prompt.token_ids, u)
            self._cache[("prep", key)] = hit
        return hit

    def clean_rows(self, history) -> list[np.ndarray]:
        """Prefix-free normalised hidden rows at each layer's attention input."""
        key = truncate(history, self.config.max_seq_len)
        hit = self._cache.get(("clean", key))
        if hit is None:
            ids, _ = self.prepare(key)
            states = forward_clean(np.asarray(ids)[None, :], self.backbone)
            hit = [x.data[0] for x in states.attn_inputs]
            self._cache[("clean", key)] = hit
        return hit

    def token_length(self, history) -> int:
        return len(self.prepare(history)[0])


def build_stack(config: RunConfig, catalog: ItemCatalog, id_params: IdModelParams,
                backbone: BackboneParams | None = None, tokenizer: Tokenizer | None = None,
                seed: int | None = None) -> ModelStack:
    """Fresh adapter and head around a pretrained ID model; backbone initialised if absent."""
    seed = config.seed if seed is None else seed
    tokenizer = tokenizer or Tokenizer.for_catalog(catalog, config.template)
    if backbone is None:
        backbone = BackboneParams.init(len(tokenizer), config.llm_dim, config.llm_layers,
                                       config.max_context, config.ffn_mult, config.use_positions,
                                       seed=seed + 1)
    backbone.freeze()
    id_params.freeze()
    adapter = AdapterParams.init(id_params.dim, backbone.dim, backbone.n_layers, config.prompt_len,
                                 variant=config.adapter_variant, per_layer_gate=config.per_layer_gate,
                                 seed=seed + 2)
    rng = np.random.default_rng(seed + 3)
    head = Tensor(trunc_normal(rng, (backbone.dim, catalog.size)),
                  requires_grad=not config.freeze_head, name="head.W_y")
    stack = ModelStack(config, catalog, tokenizer, id_params, backbone, adapter, head)
    if config.dtype == "float32":
        for t in stack.trainable():
            t.data = t.data.astype(np.float32)
            t.grad = np.zeros_like(t.data)
    return stack


@dataclass
class BatchOutput:
    logits: Tensor
    prefixes: list[Tensor]
    user_vectors: np.ndarray


def forward_batch(stack: ModelStack, histories) -> BatchOutput:
    """Adapted forward pass for histories whose prompts share a token length."""
    prepared = [stack.prepare(h) for h in histories]
    lengths = {len(ids) for ids, _ in prepared}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes prompt lengths {sorted(lengths)}")
    ids = np.array([p[0] for p in prepared], dtype=np.int64)
    users = np.stack([p[1] for p in prepared])
    prefixes = build_prefixes(Tensor(users), stack.adapter)
    res = forward_with_prefix(ids, prefixes, stack.backbone, stack.head, pooling=stack.config.pooling)
    return BatchOutput(res.logits, prefixes, users)


def predict_distribution(stack: ModelStack, history) -> np.ndarray:
    """Softmax over the catalog for one history."""
    with ad.no_grad():
        out = forward_batch(stack, [history])
        return ad.softmax(out.logits, axis=-1).data[0]


def next_item_loss(stack: ModelStack, batch) -> Tensor:
    """Mean cross-entropy of the targets in a batch of (history, target) pairs."""
    out = forward_batch(stack, [h for h, _ in batch])
    return cross_entropy(out.logits, [t for _, t in batch])


@dataclass
class LossParts:
    total: Tensor
    prediction: Tensor
    alignment: Tensor | None


def total_loss(stack: ModelStack, batch, lam: float | None = None, rho: float | None = None) -> LossParts:
    """``L = L_p + lam * L_m``; with ``lam == 0`` the alignment term is not computed at all."""
    cfg = stack.config
    lam = cfg.effective_lam if lam is None else lam
    rho = cfg.rho if rho is None else rho
    histories = [h for h, _ in batch]
    out = forward_batch(stack, histories)
    lp = cross_entropy(out.logits, [t for _, t in batch])
    if lam == 0:
        return LossParts(lp, lp, None)
    clean = [stack.clean_rows(h) for h in histories]
    targets = [np.stack([c[l] for c in clean]) for l in range(stack.backbone.n_layers)]
    lm = alignment_loss(out.prefixes, targets, rho)
    return LossParts(lp + ad.scale(lm, lam), lp, lm)


def score_cases(stack: ModelStack, histories, batch_size: int = 256) -> np.ndarray:
    """Item logits ``(n_cases, M)`` for a list of histories, in input order."""
    histories = list(histories)
    out = np.zeros((len(histories), stack.n_items))
    groups: dict[int, list[int]] = {}
    for i, h in enumerate(histories):
        groups.setdefault(stack.token_length(h), []).append(i)
    with ad.no_grad():
        for _, idx in sorted(groups.items()):
            for j in range(0, len(idx), batch_size):
                chunk = idx[j:j + batch_size]
                out[chunk] = forward_batch(stack, [histories[i] for i in chunk]).logits.data
    return out


def rank_cases(stack: ModelStack, cases, k: int = 10):
    from .metrics import rank_results

    scores = score_cases(stack, [c.history for c in cases])
    return rank_results(scores, [c.target for c in cases], [c.user_id for c in cases], k=k)
