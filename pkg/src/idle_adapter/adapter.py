"""Layer-wise user-embedding adapter and the Gaussian-kernel MMD alignment loss.

For each backbone layer ``l`` the pretrained user vector ``u`` is projected to
``p = W_u u + b_u``, repeated over the ``L'`` virtual-token slots, and blended
with a learned prefix ``C`` through a per-token sigmoid gate:

    g = sigmoid(concat(C, P) W_g)
    D = g * C + (1 - g) * P

Variants (for ablations): ``full``; ``shared`` uses one (W_u, b_u, C) triple
for every layer; ``no_refine`` drops the gate and prefix so ``D = P``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .optim import trunc_normal

VARIANTS = ("full", "shared", "no_refine")


@dataclass
class AdapterParams:
    user_dim: int
    llm_dim: int
    n_layers: int
    prompt_len: int = 2
    variant: str = "full"
    per_layer_gate: bool = False
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, user_dim: int, llm_dim: int, n_layers: int, prompt_len: int = 2,
             variant: str = "full", per_layer_gate: bool = False, seed: int = 0) -> "AdapterParams":
        if variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant {variant!r}; choose from {VARIANTS}")
        if prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        rng = np.random.default_rng(seed)
        t: dict[str, Tensor] = {}

        def put(name, *shape):
            t[name] = Tensor(trunc_normal(rng, shape), requires_grad=True, name=f"adapter.{name}")

        n_triples = 1 if variant == "shared" else n_layers
        for l in range(n_triples):
            put(f"W_u.{l}", llm_dim, user_dim)
            put(f"b_u.{l}", llm_dim)
            if variant != "no_refine":
                put(f"C.{l}", prompt_len, llm_dim)
        if variant != "no_refine":
            if per_layer_gate:
                for l in range(n_triples):
                    put(f"W_g.{l}", 2 * llm_dim, 1)
            else:
                put("W_g", 2 * llm_dim, 1)
        return cls(user_dim, llm_dim, n_layers, prompt_len, variant, per_layer_gate, t)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def _slot(self, layer: int) -> int:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        return 0 if self.variant == "shared" else layer

    def W_u(self, layer: int) -> Tensor:
        return self.tensors[f"W_u.{self._slot(layer)}"]

    def b_u(self, layer: int) -> Tensor:
        return self.tensors[f"b_u.{self._slot(layer)}"]

    def C(self, layer: int) -> Tensor:
        return self.tensors[f"C.{self._slot(layer)}"]

    def W_g(self, layer: int) -> Tensor:
        if self.per_layer_gate:
            return self.tensors[f"W_g.{self._slot(layer)}"]
        return self.tensors["W_g"]

    def count(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self.tensors.items() if name.startswith(prefix))


def _lead_matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for a 2-D weight and an input of any rank >= 2."""
    if x.ndim == 2:
        return ad.matmul(x, w)
    lead = x.shape[:-2]
    flat = ad.reshape(x, (-1,) + x.shape[-2:])
    out = ad.matmul(flat, ad.repeat(w, flat.shape[0], axis=0))
    return ad.reshape(out, lead + out.shape[-2:])


def project_user(u, layer: int, params: AdapterParams) -> Tensor:
    """``p = W_u u + b_u`` for a ``(d,)`` or ``(B, d)`` user vector; result ``(..., d')``."""
    u = ad.as_tensor(u)
    single = u.ndim == 1
    if single:
        u = ad.reshape(u, (1, -1))
    if u.shape[-1] != params.user_dim:
        raise ShapeError(f"user vector has dimension {u.shape[-1]}, adapter expects {params.user_dim}")
    p = ad.matmul(u, ad.transpose(params.W_u(layer)))
    p = p + ad.broadcast_to(params.b_u(layer), p.shape)
    return ad.reshape(p, (p.shape[-1],)) if single else p


def compute_gate(C, P, W_g) -> Tensor:
    """One sigmoid gate per virtual token: ``sigmoid(concat(C, P) W_g)``, shape ``(..., L')``."""
    C, P, W_g = ad.as_tensor(C), ad.as_tensor(P), ad.as_tensor(W_g)
    if C.shape != P.shape:
        raise ShapeError(f"gate inputs disagree: C {C.shape} vs P {P.shape}")
    if W_g.ndim == 1:
        W_g = ad.reshape(W_g, (-1, 1))
    if W_g.shape != (2 * C.shape[-1], 1):
        raise ShapeError(f"W_g has shape {W_g.shape}; expected ({2 * C.shape[-1]}, 1)")
    logits = _lead_matmul(ad.concat([C, P], axis=-1), W_g)
    return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


def refine(C, P, g) -> Tensor:
    """Row-wise convex blend ``g * C + (1 - g) * P`` with ``g`` broadcast over features."""
    C, P, g = ad.as_tensor(C), ad.as_tensor(P), ad.as_tensor(g)
    if C.shape != P.shape or g.shape != C.shape[:-1]:
        raise ShapeError(f"refine: C {C.shape}, P {P.shape}, g {g.shape} are inconsistent")
    gb = ad.broadcast_to(ad.reshape(g, g.shape + (1,)), C.shape)
    one_minus = Tensor(np.ones(C.shape, dtype=gb.data.dtype)) - gb
    return ad.mul(gb, C) + ad.mul(one_minus, P)


@dataclass
class PrefixBundle:
    prefixes: list[Tensor]
    projected: list[Tensor]
    gates: list[Tensor | None]


def build_prefixes(u, params: AdapterParams, detail: bool = False):
    """Virtual-token prefixes ``D^(l)`` for every layer.

    ``u`` is ``(d,)`` (prefixes ``(L', d')``) or ``(B, d)`` (prefixes ``(B, L', d')``).
    With ``detail=True`` a :class:`PrefixBundle` also carries ``p^(l)`` and ``g^(l)``.
    """
    u = ad.as_tensor(u)
    Lp = params.prompt_len
    prefixes, projected, gates = [], [], []
    for l in range(params.n_layers):
        p = project_user(u, l, params)
        P = ad.repeat(p, Lp, axis=p.ndim - 1)
        if params.variant == "no_refine":
            D, g = P, None
        else:
            C = params.C(l)
            if P.ndim == 3:
                C = ad.repeat(C, P.shape[0], axis=0)
            g = compute_gate(C, P, params.W_g(l))
            D = refine(C, P, g)
        prefixes.append(D)
        projected.append(p)
        gates.append(g)
    if detail:
        return PrefixBundle(prefixes, projected, gates)
    return prefixes


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------

def gaussian_kernel(x, y, rho: float) -> float:
    if rho <= 0:
        raise ValueError(f"kernel bandwidth must be positive, got {rho}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / (2.0 * rho)))


def kernel_matrix(X: Tensor, Y: Tensor, rho: float) -> Tensor:
    """Pairwise Gaussian kernel between rows: ``(..., n, d) x (..., m, d) -> (..., n, m)``."""
    if rho <= 0:
        raise ValueError(f"kernel bandwidth must be positive, got {rho}")
    X, Y = ad.as_tensor(X), ad.as_tensor(Y)
    n, m = X.shape[-2], Y.shape[-2]
    lead = X.shape[:-2]
    # |x - y|^2 = |x|^2 + |y|^2 - 2 x.y, avoiding an (n, m, d) intermediate
    xx = ad.broadcast_to(ad.sum(ad.square(X), axis=-1, keepdims=True), lead + (n, m))
    yy = ad.broadcast_to(ad.reshape(ad.sum(ad.square(Y), axis=-1), lead + (1, m)), lead + (n, m))
    sq = xx + yy - ad.scale(ad.matmul(X, ad.transpose(Y)), 2.0)
    return ad.exp(ad.scale(sq, -1.0 / (2.0 * rho)))


def mmd_loss(D, H, rho: float = 1.0) -> Tensor:
    """Biased (V-statistic) squared MMD between the row sets ``D`` and ``H``.

    Accepts 2-D ``(n, d)``/``(m, d)`` inputs or batched 3-D inputs, in which
    case the per-example values are averaged. ``H`` is treated as a constant.
    """
    D = ad.as_tensor(D)
    H = Tensor(ad.as_tensor(H).data)
    if D.shape[-2] == 0 or H.shape[-2] == 0:
        raise ValueError("mmd_loss needs non-empty sample sets")
    if D.shape[-1] != H.shape[-1] or D.shape[:-2] != H.shape[:-2]:
        raise ShapeError(f"mmd_loss: D {D.shape} and H {H.shape} are incompatible")
    axes = (-2, -1)
    kdd = ad.mean(kernel_matrix(D, D, rho), axis=axes)
    khh = ad.mean(kernel_matrix(H, H, rho), axis=axes)
    kdh = ad.mean(kernel_matrix(D, H, rho), axis=axes)
    per_example = kdd + khh - ad.scale(kdh, 2.0)
    return ad.mean(per_example) if per_example.ndim else per_example


def alignment_loss(prefixes, clean_rows, rho: float = 1.0) -> Tensor:
    """Average over layers of ``mmd_loss(D^(l), H~^(l))``."""
    if len(prefixes) != len(clean_rows):
        raise ShapeError(f"{len(prefixes)} prefix layers vs {len(clean_rows)} clean layers")
    if not prefixes:
        raise ValueError("alignment_loss needs at least one layer")
    total = None
    for D, H in zip(prefixes, clean_rows):
        term = mmd_loss(D, H, rho)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(prefixes))


def median_bandwidth(D: np.ndarray, H: np.ndarray) -> float:
    """Median heuristic: half the median squared distance over the pooled rows."""
    Z = np.concatenate([np.asarray(D).reshape(-1, D.shape[-1]), np.asarray(H).reshape(-1, H.shape[-1])])
    sq = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
    vals = sq[np.triu_indices(len(Z), k=1)]
    med = float(np.median(vals)) if vals.size else 1.0
    return max(med / 2.0, 1e-12)
