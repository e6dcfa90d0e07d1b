"""ID-based sequential recommender used to produce pretrained user vectors.

Three encoders map an item-id history to a user vector ``u``:

* ``attention``: self-attentive pooling with a single interest. Position
  embeddings only steer the pooling weights; the pooled rows are the raw item
  embeddings.
* ``gru``: a GRU over item embeddings, final hidden state.
* ``last``: the embedding of the most recent item.

Items are scored with a full softmax over ``u . i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import SplitDataset, expand_subsequences, length_buckets, truncate
from .optim import AdamW, trunc_normal

log = logging.getLogger(__name__)

ENCODERS = ("attention", "gru", "last")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class IdModelParams:
    n_items: int
    dim: int = 64
    encoder: str = "attention"
    max_seq_len: int = 20
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, n_items: int, dim: int = 64, encoder: str = "attention",
             max_seq_len: int = 20, seed: int = 0, attn_hidden: int | None = None) -> "IdModelParams":
        if encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {encoder!r}; choose from {ENCODERS}")
        rng = np.random.default_rng(seed)

        def p(name, *shape):
            return Tensor(trunc_normal(rng, shape), requires_grad=True, name=f"id.{name}")

        t = {"item_emb": p("item_emb", n_items, dim)}
        if encoder == "attention":
            hidden = attn_hidden or 4 * dim
            t["pos_emb"] = p("pos_emb", max_seq_len, dim)
            t["attn_w1"] = p("attn_w1", dim, hidden)
            t["attn_w2"] = p("attn_w2", hidden, 1)
        elif encoder == "gru":
            for gate in ("z", "r", "h"):
                t[f"gru_w{gate}"] = p(f"gru_w{gate}", dim, dim)
                t[f"gru_u{gate}"] = p(f"gru_u{gate}", dim, dim)
                t[f"gru_b{gate}"] = p(f"gru_b{gate}", dim)
        return cls(n_items, dim, encoder, max_seq_len, t)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())


def _check_ids(prefixes: np.ndarray, n_items: int) -> None:
    if prefixes.size == 0 or prefixes.shape[-1] == 0:
        raise ValueError("cannot encode an empty prefix")
    if prefixes.min() < 0 or prefixes.max() >= n_items:
        raise ValueError(f"item id out of range [0, {n_items})")


def encode_batch(prefixes, params: IdModelParams) -> Tensor:
    """Encode a ``(B, n)`` array of equal-length prefixes into ``(B, d)`` user vectors."""
    ids = np.asarray(prefixes, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    _check_ids(ids, params.n_items)
    ids = ids[:, -params.max_seq_len:]
    B, n = ids.shape
    t = params.tensors
    emb = ad.take(t["item_emb"], ids)  # B, n, d

    if params.encoder == "last":
        return emb[:, -1, :]

    if params.encoder == "attention":
        # position 0 is the most recent item
        pos = ad.take(t["pos_emb"], np.arange(n)[::-1].copy())
        hidden = ad.tanh(ad.matmul(emb + ad.repeat(pos, B, axis=0), ad.repeat(t["attn_w1"], B, axis=0)))
        scores = ad.matmul(hidden, ad.repeat(t["attn_w2"], B, axis=0))  # B, n, 1
        weights = ad.softmax(ad.transpose(scores), axis=-1)  # B, 1, n
        return ad.reshape(ad.matmul(weights, emb), (B, params.dim))

    d = params.dim
    h = Tensor(np.zeros((B, d), dtype=emb.data.dtype))

    def lin(x, w, u, b, hh):
        return ad.matmul(x, w) + ad.matmul(hh, u) + ad.repeat(b, B, axis=0)

    for step in range(n):
        x = emb[:, step, :]
        z = ad.sigmoid(lin(x, t["gru_wz"], t["gru_uz"], t["gru_bz"], h))
        r = ad.sigmoid(lin(x, t["gru_wr"], t["gru_ur"], t["gru_br"], h))
        cand = ad.tanh(lin(x, t["gru_wh"], t["gru_uh"], t["gru_bh"], ad.mul(r, h)))
        h = ad.mul(Tensor(np.ones((B, d))) - z, h) + ad.mul(z, cand)
    return h


def encode_user(prefix, params: IdModelParams) -> np.ndarray:
    """User vector ``u`` (length ``d``) for one history."""
    with ad.no_grad():
        return encode_batch(np.asarray(prefix)[None, :], params).data[0].copy()


def item_logits(users: Tensor, params: IdModelParams) -> Tensor:
    return ad.matmul(users, ad.transpose(params.tensors["item_emb"]))


def interaction_likelihood(u, params: IdModelParams) -> np.ndarray:
    """Full-softmax distribution over the catalog for user vector ``u``."""
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        return ad.softmax(item_logits(Tensor(u), params), axis=-1).data[0]


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(targets)), targets]
    return ad.scale(ad.sum(picked), -1.0 / len(targets))


def pretrain_loss(batch, params: IdModelParams) -> Tensor:
    prefixes = np.array([p for p, _ in batch], dtype=np.int64)
    targets = [t for _, t in batch]
    return cross_entropy(item_logits(encode_batch(prefixes, params), params), targets)


@dataclass
class PretrainResult:
    params: IdModelParams
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def training_pairs(split: SplitDataset, max_seq_len: int) -> list[tuple[tuple[int, ...], int]]:
    pairs = []
    for uid in sorted(split.train):
        pairs.extend(expand_subsequences(split.train[uid], max_seq_len))
    return pairs


def pretrain(split: SplitDataset, n_items: int, dim: int = 64, encoder: str = "attention",
             max_seq_len: int = 20, steps: int | None = None, epochs: int = 10,
             batch_size: int = 64, lr: float = 1e-3, weight_decay: float = 0.0,
             seed: int = 0, freeze: bool = True) -> PretrainResult:
    """Cross-entropy pretraining over every (prefix, next item) pair of the training sequences.

    ``steps`` (when given) overrides ``epochs`` as the stopping rule. The
    returned loss history holds one entry per optimizer step.
    """
    pairs = training_pairs(split, max_seq_len)
    if not pairs:
        raise ValueError("dataset has no training pairs")
    params = IdModelParams.init(n_items, dim, encoder, max_seq_len, seed=seed)
    opt = AdamW(params.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed + 1)
    losses: list[float] = []
    done = False
    epoch = 0
    while not done:
        for batch in length_buckets(pairs, batch_size, key=lambda p: len(p[0]), rng=rng):
            if steps is not None and len(losses) >= steps:
                done = True
                break
            opt.zero_grad()
            loss = pretrain_loss(batch, params)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"pretraining loss became {value} at step {len(losses)}")
            ad.backward(loss)
            opt.step()
            losses.append(value)
        epoch += 1
        if steps is None and epoch >= epochs:
            done = True
        if steps == 0:
            done = True
    log.info("pretrained %s encoder: %d steps, final loss %.4f", encoder, len(losses),
             losses[-1] if losses else float("nan"))
    if freeze:
        params.freeze()
    return PretrainResult(params, losses)


def export_user_embeddings(split: SplitDataset, params: IdModelParams) -> dict[int, np.ndarray]:
    """User vector of each user's training prefix."""
    return {uid: encode_user(truncate(seq, params.max_seq_len), params)
            for uid, seq in sorted(split.train.items())}
