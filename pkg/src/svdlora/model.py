"""Frozen toy transformer backbone with SVD-LoRA hooks at Q and V.

Two encoder layers by default: single-head softmax attention with 1/sqrt(d)
scaling, a tanh MLP (d -> 4d -> d), residual connections, mean pooling over
the sequence, then a per-task linear head. Backbone weights are generated
from a seed and frozen (write-protected); only adapters and the head train.

Forward and reverse passes are written out explicitly in numpy so gradient
correctness can be checked against finite differences without an autodiff
framework.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .adapter import AdapterSet, ModelSignature, SvdLoraAdapter, TargetId
from .errors import DataError, ModelError

_BACKBONE_TAG = 5551


@dataclass(frozen=True)
class LayerWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray  # (hidden, d)
    W2: np.ndarray  # (d, hidden)


class TinyModel:
    """Immutable toy backbone standing in for a pre-trained model."""

    def __init__(self, embed_dim: int = 32, num_layers: int = 2, seed: int = 0):
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.hidden_dim = 4 * embed_dim
        self.seed = seed
        rng = np.random.default_rng([_BACKBONE_TAG, seed])
        d, h = embed_dim, self.hidden_dim
        layers = []
        for _ in range(num_layers):
            mats = {
                "Wq": rng.standard_normal((d, d)) / np.sqrt(d),
                "Wk": rng.standard_normal((d, d)) / np.sqrt(d),
                "Wv": rng.standard_normal((d, d)) / np.sqrt(d),
                "Wo": rng.standard_normal((d, d)) / np.sqrt(d),
                "W1": rng.standard_normal((h, d)) / np.sqrt(d),
                "W2": rng.standard_normal((d, h)) / np.sqrt(h),
            }
            for m in mats.values():
                m.setflags(write=False)
            layers.append(LayerWeights(**mats))
        self.layers = tuple(layers)
        digest = hashlib.sha256(
            f"tiny-transformer d={embed_dim} L={num_layers} h={h} seed={seed}".encode()
        ).hexdigest()[:16]
        self.signature = ModelSignature(embed_dim, num_layers, digest)

    def targets(self) -> list[TargetId]:
        return [
            TargetId(layer, slot)
            for layer in range(self.num_layers)
            for slot in ("Q", "V")
        ]

    def base_param_count(self) -> int:
        return sum(
            w.size for lw in self.layers
            for w in (lw.Wq, lw.Wk, lw.Wv, lw.Wo, lw.W1, lw.W2)
        )


def _check_signature(model: TinyModel, adapters: AdapterSet) -> None:
    if adapters.signature != model.signature:
        raise ModelError(
            f"adapter set signature {adapters.signature} does not match "
            f"model signature {model.signature}"
        )


def _adapted_projection(x: np.ndarray, w: np.ndarray,
                        ad: SvdLoraAdapter | None):
    """x @ (w + delta).T without forming delta; returns the projection plus
    the low-rank intermediates needed for the backward pass."""
    out = x @ w.T
    if ad is None:
        return out, None, None
    ya = x @ ad.A.T           # (n, T, r)
    yb = ya * ad.E            # (n, T, r)
    return out + yb @ ad.B.T, ya, yb


def forward(model: TinyModel, adapters: AdapterSet, x: np.ndarray,
            head: tuple[np.ndarray, np.ndarray] | None = None,
            want_cache: bool = False):
    """Logits for a batch x of shape (n, seq_len, embed_dim).

    ``head`` overrides the set's own classifier (used when evaluating a
    merged, head-less set with a task-specific head).
    """
    _check_signature(model, adapters)
    if head is None:
        if adapters.head_w is None:
            raise ModelError("adapter set has no head and none was supplied")
        head = (adapters.head_w, adapters.head_b)
    head_w, head_b = head
    if x.ndim != 3 or x.shape[2] != model.embed_dim:
        raise ModelError(f"batch shape {x.shape} incompatible with embed dim {model.embed_dim}")

    scale = 1.0 / np.sqrt(model.embed_dim)
    cache = []
    for layer_index, lw in enumerate(model.layers):
        aq = adapters.adapters.get(TargetId(layer_index, "Q"))
        av = adapters.adapters.get(TargetId(layer_index, "V"))
        q, ya_q, yb_q = _adapted_projection(x, lw.Wq, aq)
        k = x @ lw.Wk.T
        v, ya_v, yb_v = _adapted_projection(x, lw.Wv, av)
        scores = scale * (q @ k.transpose(0, 2, 1))
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        ctx = p @ v
        x1 = x + ctx @ lw.Wo.T
        u1 = x1 @ lw.W1.T
        hact = np.tanh(u1)
        x2 = x1 + hact @ lw.W2.T
        if want_cache:
            cache.append(
                dict(x=x, q=q, k=k, v=v, p=p, ctx=ctx, x1=x1, hact=hact,
                     ya_q=ya_q, yb_q=yb_q, ya_v=ya_v, yb_v=yb_v, aq=aq, av=av)
            )
        x = x2
    pooled = x.mean(axis=1)
    logits = pooled @ head_w + head_b
    if want_cache:
        return logits, dict(layers=cache, pooled=pooled, head=head)
    return logits


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    logprob = shifted - np.log(expv.sum(axis=1, keepdims=True))
    loss = -float(logprob[np.arange(n), labels].mean())
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def orthogonality_penalty(adapters: AdapterSet) -> float:
    """Sum over adapters of ||B'B - I||_F^2 + ||AA' - I||_F^2."""
    total = 0.0
    for a in adapters.adapters.values():
        r = a.rank
        gb = a.B.T @ a.B - np.eye(r)
        ga = a.A @ a.A.T - np.eye(r)
        total += float(np.sum(gb * gb) + np.sum(ga * ga))
    return total


class GradSet:
    """Gradients for every trainable block, keyed like the adapter set."""

    def __init__(self):
        self.adapters: dict[TargetId, dict[str, np.ndarray]] = {}
        self.head_w: np.ndarray | None = None
        self.head_b: np.ndarray | None = None


def backward(model: TinyModel, adapters: AdapterSet, cache: dict,
             dlogits: np.ndarray, reg_weight: float) -> GradSet:
    """Exact reverse-mode gradients through the cached forward pass.

    Backbone weights are frozen: the pass propagates through them but never
    accumulates gradients for them. The orthogonality penalty contributes
    4*B(B'B - I) and 4*(AA' - I)A scaled by ``reg_weight``.
    """
    grads = GradSet()
    head_w, _ = cache["head"]
    grads.head_w = cache["pooled"].T @ dlogits
    grads.head_b = dlogits.sum(axis=0)
    dz = dlogits @ head_w.T  # (n, d)

    seq_len = cache["layers"][0]["x"].shape[1]
    dx = np.repeat(dz[:, None, :] / seq_len, seq_len, axis=1)
    scale = 1.0 / np.sqrt(model.embed_dim)

    for layer_index in reversed(range(model.num_layers)):
        lw = model.layers[layer_index]
        c = cache["layers"][layer_index]
        x, q, k, v, p = c["x"], c["q"], c["k"], c["v"], c["p"]

        dx1 = dx.copy()
        dh = dx @ lw.W2
        du1 = dh * (1.0 - c["hact"] ** 2)
        dx1 += du1 @ lw.W1

        dctx = dx1 @ lw.Wo
        dp = dctx @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ dctx
        dscores = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dq = scale * (dscores @ k)
        dk = scale * (dscores.transpose(0, 2, 1) @ q)

        dx_in = dx1  # residual branch
        dx_in = dx_in + dk @ lw.Wk
        for slot, dproj, ya, yb, ad, w in (
            ("Q", dq, c["ya_q"], c["yb_q"], c["aq"], lw.Wq),
            ("V", dv, c["ya_v"], c["yb_v"], c["av"], lw.Wv),
        ):
            dx_in = dx_in + dproj @ w
            if ad is None:
                continue
            dyb = dproj @ ad.B
            db = np.einsum("ntd,ntr->dr", dproj, yb)
            de = np.einsum("ntr,ntr->r", dyb, ya)
            dya = dyb * ad.E
            da = np.einsum("ntr,ntd->rd", dya, x)
            dx_in = dx_in + dya @ ad.A
            grads.adapters[TargetId(layer_index, slot)] = {"B": db, "E": de, "A": da}
        dx = dx_in

    if reg_weight != 0.0:
        for tid, a in adapters.adapters.items():
            r = a.rank
            gb = 4.0 * reg_weight * (a.B @ (a.B.T @ a.B - np.eye(r)))
            ga = 4.0 * reg_weight * ((a.A @ a.A.T - np.eye(r)) @ a.A)
            block = grads.adapters.setdefault(
                tid, {"B": np.zeros_like(a.B), "E": np.zeros_like(a.E),
                      "A": np.zeros_like(a.A)}
            )
            block["B"] = block["B"] + gb
            block["A"] = block["A"] + ga
    return grads
