"""Language-informed class distributions.

Each compositional class gets a Gaussian in embedding space: the enhanced
class embedding is the mean, and the class's description embeddings act as
support-point offsets around it. Covariance is estimated per feature
dimension across classes, pairing the m-th description of one class with the
m-th of another (descriptions are sorted lexicographically at load, which
makes the pairing deterministic). The pairwise margin tensor

    A[j, k, y] = cov[j, k, k] + cov[j, y, y] - cov[j, k, y] - cov[j, y, k]

feeds the upper-bound loss. Because offsets are frozen encoder outputs, the
covariance and margins are constant for fixed descriptions; only the means
move during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .corpus import Pair
from .errors import ValidationError

TORCH_NORM_FLOOR = 1e-8


def unit_rows(x: Tensor) -> Tensor:
    """L2-normalize along the last dimension with a clamped norm."""
    return x / x.norm(dim=-1, keepdim=True).clamp_min(TORCH_NORM_FLOOR)


# ---------------------------------------------------------------------------
# Soft prompt


class SoftPrompt(nn.Module):
    """Learnable context vectors plus per-primitive embedding tables.

    The composed token layout for class (s, o) is
    ``[p_1] ... [p_L] [state_vec] [object_vec]``.
    """

    def __init__(self, context: Tensor, state_table: Tensor, object_table: Tensor):
        super().__init__()
        if context.shape[0] < 1:
            raise ValidationError("prompt context length must be >= 1")
        self.context = nn.Parameter(context.clone())
        self.state_table = nn.Parameter(state_table.clone())
        self.object_table = nn.Parameter(object_table.clone())

    @classmethod
    def initialize(cls, vocab, lexicon, length: int = 8,
                   init_phrase: str = "a photo of",
                   dtype: torch.dtype = torch.float32) -> "SoftPrompt":
        """Context from the init phrase's token vectors, cyclically repeated to
        fill `length` slots; tables from the mean token vector of each name."""
        import numpy as np

        phrase = [lexicon.vector(t) for t in init_phrase.split()]
        ctx = np.stack([phrase[i % len(phrase)] for i in range(length)])
        states = np.stack([
            np.mean([lexicon.vector(t) for t in name.split()], axis=0) for name in vocab.states
        ])
        objects = np.stack([
            np.mean([lexicon.vector(t) for t in name.split()], axis=0) for name in vocab.objects
        ])
        return cls(
            torch.as_tensor(ctx, dtype=dtype),
            torch.as_tensor(states, dtype=dtype),
            torch.as_tensor(objects, dtype=dtype),
        )

    @property
    def length(self) -> int:
        return self.context.shape[0]

    def compose(self, state_ids: Tensor, object_ids: Tensor) -> Tensor:
        """Token sequences (B, L+2, d_tok) for a batch of class pairs."""
        if state_ids.min() < 0 or state_ids.max() >= self.state_table.shape[0]:
            raise ValidationError("state id out of range")
        if object_ids.min() < 0 or object_ids.max() >= self.object_table.shape[0]:
            raise ValidationError("object id out of range")
        b = state_ids.shape[0]
        ctx = self.context.unsqueeze(0).expand(b, -1, -1)
        return torch.cat(
            [ctx, self.state_table[state_ids].unsqueeze(1), self.object_table[object_ids].unsqueeze(1)],
            dim=1,
        )


def compose_class_tokens(prompt: SoftPrompt, state_id: int, object_id: int) -> Tensor:
    """Token sequence (L+2, d_tok) for one composition."""
    s = torch.as_tensor([state_id])
    o = torch.as_tensor([object_id])
    return prompt.compose(s, o)[0]


# ---------------------------------------------------------------------------
# Cross-attention feature enhancement (text and visual)


def cross_attention_enhance(query: Tensor, support: Tensor,
                            wq: Tensor | None = None, wk: Tensor | None = None,
                            wv: Tensor | None = None, dropout: float = 0.0,
                            training: bool = False) -> Tensor:
    """Single-head cross attention of `query` over `support`, residual added,
    unit-normalized. With no weights given, keys and values are the raw
    support rows (the identity-initialized behaviour of the learnable module).

    query: (B, d); support: (B, M, d). Returns (B, d).
    """
    if query.shape[-1] != support.shape[-1]:
        raise ValidationError(
            f"query width {query.shape[-1]} != support width {support.shape[-1]}"
        )
    if support.shape[-2] < 1:
        raise ValidationError("attention support set is empty")
    q = query if wq is None else query @ wq
    k = support if wk is None else support @ wk
    v = support if wv is None else support @ wv
    scores = torch.einsum("bd,bmd->bm", q, k) / math.sqrt(query.shape[-1])
    attn = torch.softmax(scores, dim=-1)
    out = torch.einsum("bm,bmd->bd", attn, v)
    out = torch.nn.functional.dropout(out, p=dropout, training=training)
    return unit_rows(query + out)


class CrossAttentionEnhancer(nn.Module):
    """Learnable q/k/v projections, initialized to identity so the module
    reproduces plain attention over raw support rows at construction."""

    def __init__(self, dim: int, dropout: float = 0.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        eye = torch.eye(dim, dtype=dtype)
        self.wq = nn.Parameter(eye.clone())
        self.wk = nn.Parameter(eye.clone())
        self.wv = nn.Parameter(eye.clone())
        self.dropout = float(dropout)

    def forward(self, query: Tensor, support: Tensor) -> Tensor:
        return cross_attention_enhance(
            query, support, self.wq, self.wk, self.wv,
            dropout=self.dropout, training=self.training,
        )


def tfe(query: Tensor, support: Tensor, dropout: float = 0.0, training: bool = False) -> Tensor:
    """Text feature enhancement with identity projections (reference form)."""
    if query.dim() == 1:
        return cross_attention_enhance(query[None, :], support[None, :, :],
                                       dropout=dropout, training=training)[0]
    return cross_attention_enhance(query, support, dropout=dropout, training=training)


def vfe(anchor: Tensor, views: Tensor, dropout: float = 0.0, training: bool = False) -> Tensor:
    """Visual feature enhancement: attention over {anchor} ∪ views."""
    if anchor.dim() == 1:
        support = torch.cat([anchor[None, :], views], dim=0)
        return tfe(anchor, support, dropout=dropout, training=training)
    support = torch.cat([anchor.unsqueeze(1), views], dim=1)
    return cross_attention_enhance(anchor, support, dropout=dropout, training=training)


# ---------------------------------------------------------------------------
# Distribution sets, covariance, margins


@dataclass
class ClassDistributionSet:
    """Means (C, d), support offsets (C, M, d), per-dimension covariance
    (d, C, C). `dsp` reconstructs the absolute support points."""

    means: Tensor
    offsets: Tensor
    covariance: Tensor

    @property
    def dsp(self) -> Tensor:
        return self.means.unsqueeze(1) + self.offsets

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def cross_class_covariance(offsets: Tensor) -> Tensor:
    """Per-dimension covariance across classes from support offsets (C, M, d).

    cov[j, k, y] = (1/M) * sum_m offsets[k, m, j] * offsets[y, m, j].
    Uses the biased 1/M estimator and symmetrizes exactly.
    """
    if offsets.dim() != 3 or offsets.shape[1] < 1:
        raise ValidationError("offsets must be a (C, M, d) tensor with M >= 1")
    m = offsets.shape[1]
    cov = torch.einsum("kmj,ymj->jky", offsets, offsets) / m
    return (cov + cov.transpose(1, 2)) / 2


def build_distribution_set(means: Tensor, offsets: Tensor) -> ClassDistributionSet:
    if means.shape[0] != offsets.shape[0] or means.shape[-1] != offsets.shape[-1]:
        raise ValidationError(
            f"means {tuple(means.shape)} and offsets {tuple(offsets.shape)} disagree"
        )
    return ClassDistributionSet(means, offsets, cross_class_covariance(offsets))


@dataclass
class MarginTensor:
    """Pairwise covariance margins A (d, C, C); A[:, y, y] = 0 exactly."""

    a: Tensor

    def gather_target(self, targets: Tensor) -> Tensor:
        """A[:, :, y_b] for a batch of targets: (d, C, B)."""
        return self.a[:, :, targets]

    def batch_quadratic(self, v: Tensor, targets: Tensor, scale: float) -> Tensor:
        """scale * sum_j v[b,j]^2 A[j,k,y_b] for all k: (B, C)."""
        return torch.einsum("bj,jkb->bk", v * v, self.gather_target(targets)) * scale


def margin_tensor(dist: ClassDistributionSet | Tensor) -> MarginTensor:
    """Margin tensor from a distribution set or a raw (d, C, C) covariance."""
    cov = dist.covariance if isinstance(dist, ClassDistributionSet) else dist
    diag = torch.diagonal(cov, dim1=1, dim2=2)                 # (d, C)
    sym = cov + cov.transpose(1, 2)
    a = diag.unsqueeze(2) + diag.unsqueeze(1) - sym
    return MarginTensor(a)


def margin_quadratic(v: Tensor, margins: MarginTensor, k: int, y: int, tau: float) -> Tensor:
    """Per-dimension quadratic form sum_j v_j^2 * A[j, k, y] / (2 tau)."""
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return (v * v * margins.a[:, k, y]).sum() / (2.0 * tau)


# ---------------------------------------------------------------------------
# Covariance sharing and primitive-level distributions


def _group_indices(class_list: list[Pair], num_groups: int, component: int) -> list[list[int]]:
    groups: list[list[int]] = [[] for _ in range(num_groups)]
    for idx, pair in enumerate(class_list):
        groups[pair[component]].append(idx)
    return groups


def _grouped_means(tensor: Tensor, groups: list[list[int]], label: str) -> Tensor:
    rows = []
    for gid, members in enumerate(groups):
        if not members:
            raise ValidationError(f"{label} {gid} has no compositions in the class list")
        rows.append(tensor[members].mean(dim=0))
    return torch.stack(rows)


@dataclass
class SharedCovariance:
    """Object-level covariance shared across states (memory d*|O|^2).

    `class_to_object` maps each compositional class index to its object id;
    margins between compositions are looked up at their objects' entry.
    """

    object_means: Tensor        # (O, d)
    object_offsets: Tensor      # (O, M, d)
    covariance: Tensor          # (d, O, O)
    class_to_object: Tensor     # (C,) long

    def margins(self) -> "SharedMarginTensor":
        return SharedMarginTensor(margin_tensor(self.covariance).a, self.class_to_object)


@dataclass
class SharedMarginTensor:
    """Margin lookup that maps compositional pairs to object-level entries."""

    a_object: Tensor            # (d, O, O)
    class_to_object: Tensor     # (C,)

    @property
    def a(self) -> Tensor:
        """Dense (d, C, C) expansion; intended for tests, not the training path."""
        idx = self.class_to_object
        return self.a_object[:, idx][:, :, idx]

    def gather_target(self, targets: Tensor) -> Tensor:
        obj_t = self.class_to_object[targets]
        return self.a_object[:, self.class_to_object][:, :, obj_t]

    def batch_quadratic(self, v: Tensor, targets: Tensor, scale: float) -> Tensor:
        return torch.einsum("bj,jkb->bk", v * v, self.gather_target(targets)) * scale


def share_covariance(dist: ClassDistributionSet, class_list: list[Pair],
                     num_objects: int) -> SharedCovariance:
    """Group means and offsets by object label and estimate covariance in
    object space; compositions inherit their object's margin row."""
    groups = _group_indices(class_list, num_objects, component=1)
    means_o = _grouped_means(dist.means, groups, "object")
    offsets_o = _grouped_means(dist.offsets, groups, "object")
    cov = cross_class_covariance(offsets_o)
    mapping = torch.as_tensor([pair[1] for pair in class_list], dtype=torch.long)
    return SharedCovariance(means_o, offsets_o, cov, mapping)


def primitive_distributions(dist: ClassDistributionSet, class_list: list[Pair],
                            num_states: int, num_objects: int) -> tuple[ClassDistributionSet, ClassDistributionSet]:
    """State-level and object-level distribution sets by averaging the
    compositional means and offsets over the classes sharing each primitive."""
    s_groups = _group_indices(class_list, num_states, component=0)
    o_groups = _group_indices(class_list, num_objects, component=1)
    state_set = build_distribution_set(
        _grouped_means(dist.means, s_groups, "state"),
        _grouped_means(dist.offsets, s_groups, "state"),
    )
    object_set = build_distribution_set(
        _grouped_means(dist.means, o_groups, "object"),
        _grouped_means(dist.offsets, o_groups, "object"),
    )
    return state_set, object_set
