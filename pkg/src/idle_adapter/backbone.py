"""Desk-scale frozen transformer standing in for the language model.

The encoder is pre-norm: each block computes ``X = LN(H)``, self-attention
over ``X`` and a GELU feed-forward, both residual. When per-layer prefixes
``D`` are given, keys and values are projected from ``concat(D, X)`` while
queries still come from ``X`` alone, so every token may attend to the
virtual tokens but the virtual tokens produce no outputs of their own.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .dataset import ItemCatalog, truncate
from .optim import AdamW, trunc_normal

DEFAULT_TEMPLATE = "Recommend the next product this user is likely to want, based on their purchase history: {titles}"
UNK = "<unk>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class PromptError(ValueError):
    pass


class ContextOverflow(ValueError):
    pass


# ---------------------------------------------------------------------------
# tokenizer and prompts
# ---------------------------------------------------------------------------

def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Word-level tokenizer; punctuation marks are separate tokens, id 0 is UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            tokens = [UNK] + [t for t in tokens if t != UNK]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Tokenizer":
        vocab = sorted({w for text in texts for w in split_words(text)})
        return cls([UNK] + vocab)

    @classmethod
    def for_catalog(cls, catalog: ItemCatalog, template: str = DEFAULT_TEMPLATE) -> "Tokenizer":
        return cls.build([template.replace("{titles}", ", ")] + list(catalog.titles))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, 0) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


def tokenize(text: str, tokenizer: Tokenizer) -> list[int]:
    return tokenizer.encode(text)


@dataclass(frozen=True)
class HardPrompt:
    text: str
    token_ids: tuple[int, ...]


def build_hard_prompt(user_prefix, catalog: ItemCatalog, tokenizer: Tokenizer,
                      template: str = DEFAULT_TEMPLATE, max_seq_len: int | None = None) -> HardPrompt:
    """Fill ``template``'s ``{titles}`` slot with the comma-joined titles of the prefix."""
    prefix = truncate(user_prefix, max_seq_len)
    if not prefix:
        raise PromptError("cannot build a prompt from an empty history")
    if template.count("{titles}") != 1:
        raise PromptError("template must contain exactly one {titles} placeholder")
    titles = []
    for item in prefix:
        if not 0 <= item < catalog.size or not catalog.titles[item].strip():
            raise PromptError(f"item {item} has no title")
        titles.append(catalog.titles[item])
    text = template.replace("{titles}", ", ".join(titles))
    return HardPrompt(text, tuple(tokenizer.encode(text)))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

LAYER_KEYS = ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b",
              "ff_w1", "ff_b1", "ff_w2", "ff_b2")


@dataclass
class BackboneParams:
    vocab_size: int
    dim: int = 32
    n_layers: int = 2
    max_context: int = 128
    ffn_mult: int = 4
    use_positions: bool = True
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, vocab_size: int, dim: int = 32, n_layers: int = 2, max_context: int = 128,
             ffn_mult: int = 4, use_positions: bool = True, seed: int = 0) -> "BackboneParams":
        if n_layers < 1 or dim < 1:
            raise ValueError("need at least one layer and a positive width")
        rng = np.random.default_rng(seed)
        t: dict[str, Tensor] = {}

        def put(name, arr):
            t[name] = Tensor(arr, requires_grad=False, name=f"llm.{name}")

        def lin(fan_in, *shape):
            std = 1.0 / np.sqrt(fan_in)
            return trunc_normal(rng, shape, std=std, bound=2 * std)

        hidden = ffn_mult * dim
        put("tok_emb", trunc_normal(rng, (vocab_size, dim), std=1.0, bound=2.0))
        put("pos_emb", trunc_normal(rng, (max_context, dim), std=1.0, bound=2.0))
        for l in range(n_layers):
            put(f"{l}.ln1_g", np.ones(dim))
            put(f"{l}.ln1_b", np.zeros(dim))
            put(f"{l}.w_q", lin(dim, dim, dim))
            put(f"{l}.w_k", lin(dim, dim, dim))
            put(f"{l}.w_v", lin(dim, dim, dim))
            put(f"{l}.w_o", lin(dim, dim, dim))
            put(f"{l}.ln2_g", np.ones(dim))
            put(f"{l}.ln2_b", np.zeros(dim))
            put(f"{l}.ff_w1", lin(dim, dim, hidden))
            put(f"{l}.ff_b1", np.zeros(hidden))
            put(f"{l}.ff_w2", lin(hidden, hidden, dim))
            put(f"{l}.ff_b2", np.zeros(dim))
        put("lnf_g", np.ones(dim))
        put("lnf_b", np.zeros(dim))
        return cls(vocab_size, dim, n_layers, max_context, ffn_mult, use_positions, t)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def freeze(self) -> None:
        for p in self.tensors.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.tensors.values():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class LayerStates:
    """Residual-stream states ``H^(0..L)`` and the normalised attention inputs ``X^(0..L-1)``."""

    hidden: list[Tensor]
    attn_inputs: list[Tensor]
    attentions: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.attn_inputs)


@dataclass
class ForwardResult:
    states: LayerStates
    logits: Tensor | None
    pooled: Tensor


def _bmm(x: Tensor, w: Tensor) -> Tensor:
    """Apply a shared 2-D weight to a batched 3-D input."""
    return ad.matmul(x, ad.repeat(w, x.shape[0], axis=0))


def _bias(x: Tensor, b: Tensor) -> Tensor:
    return x + ad.broadcast_to(b, x.shape)


def _as_batch(token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ShapeError(f"token ids must be a non-empty (B, T) array, got shape {ids.shape}")
    return ids


def _check_prefixes(prefixes, n_layers: int, batch: int, dim: int) -> list[Tensor]:
    if len(prefixes) != n_layers:
        raise ShapeError(f"expected {n_layers} prefixes (one per layer), got {len(prefixes)}")
    out = []
    for l, d in enumerate(prefixes):
        d = ad.as_tensor(d)
        if d.ndim == 2:
            d = ad.repeat(d, batch, axis=0)
        if d.ndim != 3 or d.shape[0] != batch or d.shape[2] != dim:
            raise ShapeError(f"prefix for layer {l} has shape {d.shape}; expected ({batch}, L', {dim})")
        out.append(d)
    return out


def embed(ids: np.ndarray, params: BackboneParams) -> Tensor:
    B, T = ids.shape
    h = ad.take(params["tok_emb"], ids)
    if params.use_positions:
        h = h + ad.repeat(ad.take(params["pos_emb"], np.arange(T)), B, axis=0)
    return h


def forward_with_prefix(token_ids, prefixes, params: BackboneParams, head: Tensor | None = None,
                        pooling: str = "last") -> ForwardResult:
    """Run the encoder with per-layer virtual-token prefixes (``None`` for a clean pass).

    ``prefixes`` holds one ``(B, L', d')`` (or ``(L', d')``) tensor per layer.
    With ``head`` of shape ``(d', M)`` the result carries item logits computed
    from the final-normalised last token (``pooling='last'``) or token mean.
    """
    ids = _as_batch(token_ids)
    B, T = ids.shape
    if T > params.max_context:
        raise ContextOverflow(f"prompt has {T} tokens; backbone context is {params.max_context}")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise ShapeError("token id outside the vocabulary")
    d = params.dim
    if prefixes is not None:
        prefixes = _check_prefixes(prefixes, params.n_layers, B, d)
    scale = 1.0 / np.sqrt(d)

    h = embed(ids, params)
    hidden, inputs, attns = [h], [], []
    for l in range(params.n_layers):
        p = lambda k: params[f"{l}.{k}"]  # noqa: E731
        x = ad.layer_norm(h, p("ln1_g"), p("ln1_b"))
        inputs.append(x)
        kv_in = x if prefixes is None else ad.concat([prefixes[l], x], axis=1)
        q = _bmm(x, p("w_q"))
        k = _bmm(kv_in, p("w_k"))
        v = _bmm(kv_in, p("w_v"))
        a = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), scale), axis=-1)
        attns.append(a.data)
        h = h + _bmm(ad.matmul(a, v), p("w_o"))
        y = ad.layer_norm(h, p("ln2_g"), p("ln2_b"))
        y = _bias(_bmm(ad.gelu(_bias(_bmm(y, p("ff_w1")), p("ff_b1"))), p("ff_w2")), p("ff_b2"))
        h = h + y
        hidden.append(h)

    final = ad.layer_norm(h, params["lnf_g"], params["lnf_b"])
    if pooling == "last":
        pooled = final[:, -1, :]
    elif pooling == "mean":
        pooled = ad.mean(final, axis=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    logits = ad.matmul(pooled, head) if head is not None else None
    return ForwardResult(LayerStates(hidden, inputs, attns), logits, pooled)


def forward_clean(token_ids, params: BackboneParams) -> LayerStates:
    """Prefix-free pass without graph recording; the alignment target."""
    with ad.no_grad():
        return forward_with_prefix(token_ids, None, params).states


def warmup_backbone(params: BackboneParams, prompts: Sequence[Sequence[int]], steps: int,
                    lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Short next-token language-model pass over prompt token ids (tied output embedding).

    Leaves the backbone frozen afterwards.
    """
    if steps <= 0:
        params.freeze()
        return []
    params.unfreeze()
    opt = AdamW(params.parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    prompts = [list(p) for p in prompts if len(p) >= 2]
    losses = []
    for _ in range(steps):
        ids = np.asarray(prompts[int(rng.integers(len(prompts)))])[None, :]
        opt.zero_grad()
        res = forward_with_prefix(ids[:, :-1], None, params)
        final = ad.layer_norm(res.states.hidden[-1], params["lnf_g"], params["lnf_b"])
        logits = ad.matmul(final[0], ad.transpose(params["tok_emb"]))
        logp = ad.log_softmax(logits, axis=-1)
        tgt = ids[0, 1:]
        loss = ad.scale(ad.sum(logp[np.arange(len(tgt)), tgt]), -1.0 / len(tgt))
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
    params.freeze()
    return losses
