"""SVD-structured low-rank adapters.

An adapter holds factors (B, E, A) for one target weight matrix and
contributes a delta ``B @ diag(E) @ A`` on top of the frozen weight. E is
stored as a length-r vector; B and A are only approximately orthonormal
while training and are restored to an exact SVD by :func:`canonicalize`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DimensionError, ModelError, ParameterError

SLOTS = ("Q", "V")

INIT_STD_DEFAULT = 0.02


@dataclass(frozen=True, order=True)
class TargetId:
    """One adapted weight matrix: attention layer index plus Q or V slot."""

    layer: int
    slot: str

    def __post_init__(self):
        if self.layer < 0:
            raise ParameterError(f"layer index must be >= 0, got {self.layer}")
        if self.slot not in SLOTS:
            raise ParameterError(f"slot must be one of {SLOTS}, got {self.slot!r}")

    def __str__(self) -> str:
        return f"layer{self.layer}.{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "TargetId":
        layer, slot = text.split(".")
        return cls(layer=int(layer.removeprefix("layer")), slot=slot)


@dataclass(frozen=True)
class SvdLoraAdapter:
    """Factors (B, E, A) for one target; delta = B @ diag(E) @ A."""

    target: TargetId
    B: np.ndarray  # (d_m, r)
    E: np.ndarray  # (r,)
    A: np.ndarray  # (r, d_n)

    def __post_init__(self):
        b = linalg.as_matrix(self.B, "B")
        a = linalg.as_matrix(self.A, "A")
        e = np.ascontiguousarray(self.E, dtype=np.float64)
        if e.ndim != 1:
            raise DimensionError(f"E must be a vector, got shape {e.shape}")
        r = b.shape[1]
        if e.shape[0] != r or a.shape[0] != r:
            raise DimensionError(
                f"inconsistent adapter shapes B{b.shape} E{e.shape} A{a.shape}"
            )
        if r > min(b.shape[0], a.shape[1]):
            raise ParameterError(
                f"rank {r} exceeds min(d_m, d_n) = {min(b.shape[0], a.shape[1])}"
            )
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "E", e)
        object.__setattr__(self, "A", a)

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])


def init_adapter(d_m: int, d_n: int, r: int, seed: int,
                 target: TargetId | None = None,
                 std: float = INIT_STD_DEFAULT) -> SvdLoraAdapter:
    """Fresh adapter: E all zero, B and A i.i.d. Gaussian(0, std^2).

    The zero diagonal guarantees the initial delta is exactly zero, so the
    adapted forward pass starts identical to the frozen backbone.
    """
    if r < 1:
        raise ParameterError(f"rank must be positive, got {r}")
    if r > min(d_m, d_n):
        raise ParameterError(f"rank {r} exceeds min({d_m}, {d_n})")
    rng = np.random.default_rng(seed)
    b = std * rng.standard_normal((d_m, r))
    a = std * rng.standard_normal((r, d_n))
    return SvdLoraAdapter(
        target=target if target is not None else TargetId(0, "Q"),
        B=b, E=np.zeros(r), A=a,
    )


def delta(a: SvdLoraAdapter) -> np.ndarray:
    """Materialize the dense update B @ diag(E) @ A."""
    return (a.B * a.E) @ a.A


def apply(a: SvdLoraAdapter, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Adapted product ``w @ x + B @ diag(E) @ (A @ x)`` in factored order.

    The largest temporary is r-by-batch; the dense delta is never formed.
    """
    w = linalg.as_matrix(w, "w")
    x = linalg.as_matrix(x, "x")
    if w.shape != a.shape:
        raise DimensionError(f"weight shape {w.shape} != adapter shape {a.shape}")
    if x.shape[0] != w.shape[1]:
        raise DimensionError(f"input shape {x.shape} incompatible with weight {w.shape}")
    return w @ x + a.B @ (a.E[:, None] * (a.A @ x))


def canonicalize(a: SvdLoraAdapter) -> SvdLoraAdapter:
    """Restore exact SVD structure without changing the delta.

    QR-factors B and A.T, SVD-decomposes the small r-by-r core, and drops
    exactly-zero singular values (keeping at least rank 1). The output has
    orthonormal B columns / A rows and a non-negative, non-increasing E.
    """
    qb, rb = np.linalg.qr(a.B)
    qa, ra = np.linalg.qr(a.A.T)
    core = (rb * a.E) @ ra.T
    f = linalg.svd(core)
    keep = f.S > f.S[0] * 1e-15 if f.S[0] > 0 else np.zeros(len(f.S), dtype=bool)
    k = max(1, int(keep.sum()))
    return SvdLoraAdapter(
        target=a.target,
        B=qb @ f.U[:, :k],
        E=f.S[:k].copy(),
        A=(qa @ f.V[:, :k]).T,
    )


def is_canonical(a: SvdLoraAdapter, atol: float = 1e-8) -> bool:
    r = a.rank
    if np.any(a.E < 0) or np.any(np.diff(a.E) > 0):
        return False
    if np.linalg.norm(a.B.T @ a.B - np.eye(r)) > atol:
        return False
    return np.linalg.norm(a.A @ a.A.T - np.eye(r)) <= atol


@dataclass(frozen=True)
class ModelSignature:
    """Identity of the backbone an adapter set was trained on."""

    embed_dim: int
    num_layers: int
    config_digest: str

    def as_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSignature":
        return cls(int(d["embed_dim"]), int(d["num_layers"]), str(d["config_digest"]))


@dataclass
class AdapterSet:
    """All adapters for one task, plus its classifier head and metadata.

    The head is task-specific (class counts differ across tasks) and is
    dropped on merge; merged sets carry ``head_w is None``.
    """

    signature: ModelSignature
    adapters: dict[TargetId, SvdLoraAdapter]
    head_w: np.ndarray | None = None  # (embed_dim, num_classes)
    head_b: np.ndarray | None = None  # (num_classes,)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for tid, ad in self.adapters.items():
            if tid != ad.target:
                raise ModelError(f"adapter keyed {tid} carries target {ad.target}")
            if tid.layer >= self.signature.num_layers:
                raise ModelError(
                    f"target {tid} out of range for {self.signature.num_layers}-layer model"
                )
        if (self.head_w is None) != (self.head_b is None):
            raise ModelError("head weight and bias must be given together")
        if self.head_w is not None:
            hw = linalg.as_matrix(self.head_w, "head_w")
            hb = np.ascontiguousarray(self.head_b, dtype=np.float64)
            if hw.shape[0] != self.signature.embed_dim:
                raise DimensionError(
                    f"head rows {hw.shape[0]} != embed dim {self.signature.embed_dim}"
                )
            if hb.shape != (hw.shape[1],):
                raise DimensionError(f"head bias shape {hb.shape} != ({hw.shape[1]},)")
            self.head_w = hw
            self.head_b = hb

    @property
    def num_classes(self) -> int | None:
        return None if self.head_w is None else self.head_w.shape[1]

    def sorted_targets(self) -> list[TargetId]:
        return sorted(self.adapters)

    def canonicalized(self) -> "AdapterSet":
        return AdapterSet(
            signature=self.signature,
            adapters={t: canonicalize(a) for t, a in self.adapters.items()},
            head_w=None if self.head_w is None else self.head_w.copy(),
            head_b=None if self.head_b is None else self.head_b.copy(),
            metadata=dict(self.metadata),
        )

    def digest(self) -> str:
        """Content hash over signature, metadata and all tensors."""
        h = hashlib.sha256()
        h.update(repr(sorted(self.signature.as_dict().items())).encode())
        h.update(repr(sorted((str(k), str(v)) for k, v in self.metadata.items())).encode())
        for tid in self.sorted_targets():
            a = self.adapters[tid]
            h.update(str(tid).encode())
            for arr in (a.B, a.E, a.A):
                h.update(np.ascontiguousarray(arr).tobytes())
        if self.head_w is not None:
            h.update(b"head")
            h.update(self.head_w.tobytes())
            h.update(self.head_b.tobytes())
        return h.hexdigest()


def param_count(s: AdapterSet, base_param_count: int) -> tuple[int, float]:
    """Trainable adapter parameters and their fraction of the base model.

    Heads are excluded; each adapter contributes d_m*r + r + r*d_n.
    """
    if base_param_count <= 0:
        raise ParameterError(f"base parameter count must be positive, got {base_param_count}")
    count = sum(
        a.B.size + a.E.size + a.A.size for a in s.adapters.values()
    )
    return count, count / base_param_count
