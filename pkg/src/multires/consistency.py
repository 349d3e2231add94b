"""Cross-resolution consistency penalties.

Two ways of predicting a coarse instance's label from its fine group are
provided: a soft maximum over fine probabilities (the MIL view) and an
additive-attention pooling of fine hidden states fed through the fine
model's head. Either prediction is compared to the coarse model's own
prediction by squared difference.

Group-level functions are vectorised over many coarse instances at once by
laying fine rows out flat with a segment id naming their coarse instance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import CorrespondenceMap, InstanceSet
from .models import BoundClassifier
from .numcore import Tape, Tensor

log = logging.getLogger(__name__)

MIL = "mil"
ATTENTION = "attention"


@dataclass(frozen=True)
class SmaxConfig:
    base: float = math.e

    def __post_init__(self):
        if not self.base > 1:
            raise ValueError(f"softmax base must exceed 1, got {self.base}")


# -- soft maximum ------------------------------------------------------------


def group_smax(probs, segments, n_groups: int, cfg: SmaxConfig = SmaxConfig()) -> Tensor:
    """Per-group ``sum p * base**p / sum base**p``.

    Evaluated as ``m + sum w (p - m)`` with ``m`` the group maximum held
    constant; the weights sum to one so value and gradient are unchanged,
    but equal inputs come back exactly.
    """
    probs = nc.as_tensor(probs)
    segments = np.asarray(segments, dtype=np.intp)
    w = nc.segment_softmax(nc.mul(probs, math.log(cfg.base)), segments, n_groups)
    m = np.full(n_groups, -np.inf)
    np.maximum.at(m, segments, probs.value)
    m[np.isinf(m)] = 0.0
    spread = nc.segment_sum(nc.mul(w, nc.sub(probs, Tensor(m[segments]))), segments, n_groups)
    return nc.add(spread, Tensor(m))


def smax_aggregate(probs, cfg: SmaxConfig = SmaxConfig()) -> Tensor:
    probs = nc.as_tensor(probs)
    if probs.size == 0:
        raise ValueError("soft maximum of an empty group")
    p = probs.value
    if p.min() < 0 or p.max() > 1:
        raise ValueError("soft maximum expects probabilities in [0, 1]")
    out = group_smax(probs, np.zeros(probs.size, dtype=np.intp), 1, cfg)
    return nc.total(out)


def mil_consistency(coarse_pred, fine_preds, cfg: SmaxConfig = SmaxConfig()) -> Tensor:
    return nc.square(nc.sub(nc.total(nc.as_tensor(coarse_pred)), smax_aggregate(fine_preds, cfg)))


# -- attention ---------------------------------------------------------------


@dataclass
class AttentionParams:
    """Additive attention scorer ``v . tanh(W [h_fine ; h_coarse] + b)``.

    ``W`` is stored as ``(H_fine + H_coarse) x A`` so rows of concatenated
    hidden states multiply it directly.
    """

    fine_dim: int
    coarse_dim: int
    align_dim: int = 8
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def bind(self, tape: Tape | None = None, prefix: str = "att.") -> "BoundAttention":
        if tape is None:
            return BoundAttention({k: Tensor(v) for k, v in self.params.items()})
        return BoundAttention({k: tape.parameter(prefix + k, v) for k, v in self.params.items()})

    def describe(self) -> str:
        return f"attention fine_dim={self.fine_dim} coarse_dim={self.coarse_dim} align_dim={self.align_dim}"

    @classmethod
    def from_descriptor(cls, line: str, params: dict[str, np.ndarray]) -> "AttentionParams":
        kind, *rest = line.split()
        if kind != "attention":
            raise ValueError(f"not an attention checkpoint: {line!r}")
        kv = dict(tok.split("=", 1) for tok in rest)
        return cls(int(kv["fine_dim"]), int(kv["coarse_dim"]), int(kv["align_dim"]), params)


def init_attention(fine_dim: int, coarse_dim: int, seed, align_dim: int = 8, scale: float = 0.1) -> AttentionParams:
    rng = np.random.default_rng(seed)
    params = {
        "W": rng.uniform(-scale, scale, size=(fine_dim + coarse_dim, align_dim)),
        "b": np.zeros(align_dim),
        "v": rng.uniform(-scale, scale, size=align_dim),
    }
    return AttentionParams(fine_dim, coarse_dim, align_dim, params)


@dataclass
class BoundAttention:
    params: dict[str, Tensor]

    def scores(self, h_fine: Tensor, h_coarse_rows: Tensor) -> Tensor:
        W = self.params["W"]
        if h_fine.shape[1] + h_coarse_rows.shape[1] != W.shape[0]:
            raise nc.ShapeError(
                f"hidden sizes {h_fine.shape[1]} + {h_coarse_rows.shape[1]} do not match "
                f"attention input size {W.shape[0]}"
            )
        z = nc.concat([h_fine, h_coarse_rows], axis=1)
        return nc.matmul(nc.tanh(nc.add_bias(nc.matmul(z, W), self.params["b"])), self.params["v"])


def group_attention_weights(h_fine, h_coarse, segments, n_groups: int, att: BoundAttention) -> Tensor:
    """Attention of each fine row within its group; ``h_coarse`` has one row per group."""
    h_fine, h_coarse = nc.as_tensor(h_fine), nc.as_tensor(h_coarse)
    s = att.scores(h_fine, nc.take(h_coarse, segments))
    return nc.segment_softmax(s, segments, n_groups)


def group_attention_aggregate(a, h_fine, segments, n_groups: int) -> Tensor:
    return nc.segment_sum(nc.scale_rows(h_fine, a), segments, n_groups)


def _as_bound(att) -> BoundAttention:
    return att.bind() if isinstance(att, AttentionParams) else att


def attention_weights(h_fine, h_coarse, att) -> Tensor:
    """Weights over one group of fine hidden vectors (rows of ``h_fine``)."""
    h_fine = nc.as_tensor(h_fine)
    if h_fine.value.ndim != 2 or h_fine.shape[0] == 0:
        raise ValueError("attention over an empty group")
    h_coarse = nc.as_tensor(h_coarse)
    row = nc.reshape(h_coarse, (1, -1)) if h_coarse.value.ndim == 1 else h_coarse
    return group_attention_weights(h_fine, row, np.zeros(h_fine.shape[0], dtype=np.intp), 1, _as_bound(att))


def attention_aggregate(a, h_fine) -> Tensor:
    a, h_fine = nc.as_tensor(a), nc.as_tensor(h_fine)
    if a.value.ndim != 1 or h_fine.value.ndim != 2 or a.size != h_fine.shape[0]:
        raise nc.ShapeError(f"{a.shape} weights for hidden block {h_fine.shape}")
    out = group_attention_aggregate(a, h_fine, np.zeros(a.size, dtype=np.intp), 1)
    return nc.take(out, 0)


def attention_consistency(coarse_model: BoundClassifier, fine_model: BoundClassifier, x_coarse, x_fine_group, att) -> Tensor:
    x_coarse = np.asarray(x_coarse.value if isinstance(x_coarse, Tensor) else x_coarse, dtype=np.float64)
    xc = Tensor(x_coarse.reshape(1, -1))
    hc = coarse_model.hidden(xc)
    pc = coarse_model.head(hc)
    hf = fine_model.hidden(nc.as_tensor(x_fine_group))
    a = attention_weights(hf, hc, att)
    pooled = group_attention_aggregate(a, hf, np.zeros(a.size, dtype=np.intp), 1)
    return nc.total(nc.square(nc.sub(pc, fine_model.head(pooled))))


# -- per-pair term -----------------------------------------------------------


@dataclass(frozen=True)
class GroupIndex:
    """Row layout of consistency groups for one (coarse, fine) pair.

    ``coarse_rows[g]`` indexes the coarse unlabeled set; fine rows listed in
    ``fine_rows`` belong to group ``segments``. Coarse instances whose group
    holds no unlabeled fine instance are dropped and counted in ``skipped``.
    """

    coarse_rows: np.ndarray
    fine_rows: np.ndarray
    segments: np.ndarray
    skipped: int = 0

    @property
    def n_groups(self) -> int:
        return int(self.coarse_rows.size)

    def select(self, groups) -> "GroupIndex":
        """Sub-index keeping whole groups, in the order given."""
        groups = np.asarray(groups, dtype=np.intp)
        starts = np.searchsorted(self.segments, np.arange(self.n_groups + 1))
        rows, segs = [], []
        for new, g in enumerate(groups):
            rows.append(self.fine_rows[starts[g]:starts[g + 1]])
            segs.append(np.full(starts[g + 1] - starts[g], new, dtype=np.intp))
        if not rows:
            return GroupIndex(np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0, np.intp))
        return GroupIndex(self.coarse_rows[groups], np.concatenate(rows), np.concatenate(segs))


def group_index(corr: CorrespondenceMap, coarse: InstanceSet, fine: InstanceSet) -> GroupIndex:
    fine_row = fine.row_of()
    c_rows, f_rows, segs = [], [], []
    skipped = 0
    for row, cid in enumerate(coarse.ids.tolist()):
        members = [fine_row[f] for f in corr.groups.get(cid, ()) if f in fine_row]
        if not members:
            skipped += 1
            continue
        g = len(c_rows)
        c_rows.append(row)
        f_rows.extend(members)
        segs.extend([g] * len(members))
    if skipped:
        log.warning("%d coarse instance(s) have no unlabeled fine instances and were skipped", skipped)
    return GroupIndex(
        np.array(c_rows, dtype=np.intp),
        np.array(f_rows, dtype=np.intp),
        np.array(segs, dtype=np.intp),
        skipped,
    )


def group_terms(
    x_coarse: np.ndarray,
    x_fine: np.ndarray,
    idx: GroupIndex,
    mode: str,
    coarse_model: BoundClassifier,
    fine_model: BoundClassifier,
    att: BoundAttention | None = None,
    cfg: SmaxConfig = SmaxConfig(),
) -> Tensor:
    """Vector of d values, one per group in ``idx``."""
    G = idx.n_groups
    xc = Tensor(x_coarse[idx.coarse_rows])
    xf = Tensor(x_fine[idx.fine_rows])
    hc = coarse_model.hidden(xc)
    pc = coarse_model.head(hc)
    hf = fine_model.hidden(xf)
    if mode == MIL:
        pooled = group_smax(fine_model.head(hf), idx.segments, G, cfg)
    elif mode == ATTENTION:
        if att is None:
            raise ValueError("attention mode needs attention parameters")
        a = group_attention_weights(hf, hc, idx.segments, G, att)
        pooled = fine_model.head(group_attention_aggregate(a, hf, idx.segments, G))
    else:
        raise ValueError(f"unknown consistency mode {mode!r}")
    return nc.square(nc.sub(pc, pooled))


def pair_consistency(
    coarse: InstanceSet,
    fine: InstanceSet,
    corr: CorrespondenceMap | GroupIndex,
    mode: str,
    coarse_model: BoundClassifier,
    fine_model: BoundClassifier,
    att: BoundAttention | None = None,
    cfg: SmaxConfig = SmaxConfig(),
    reduce: str = "mean",
) -> Tensor:
    """Consistency between one coarse layer and the fine layer over unlabeled data."""
    idx = corr if isinstance(corr, GroupIndex) else group_index(corr, coarse, fine)
    if idx.n_groups == 0:
        return Tensor(0.0)
    d = group_terms(coarse.features, fine.features, idx, mode, coarse_model, fine_model, att, cfg)
    if reduce == "mean":
        return nc.mean(d)
    if reduce == "sum":
        return nc.total(d)
    raise ValueError(f"unknown reduction {reduce!r}")
