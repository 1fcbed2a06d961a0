"""Visual-language primitive decomposition.

Two parallel heads project the enhanced image feature into state and object
subspaces; each is scored by cosine against the text class embeddings grouped
over the compositions sharing that primitive. The recomposed compositional
logit matrix is the Cartesian sum of the two primitive logit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .corpus import Pair
from .distributions import unit_rows
from .errors import ValidationError


class DecompositionHead(nn.Module):
    """Residual one-hidden-layer MLP with GELU, output re-unit-normalized.

    The output layer starts at zero so the head is exactly the identity on
    unit vectors at construction, preserving the pretrained alignment.
    """

    def __init__(self, dim: int, dtype: torch.dtype = torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        w1 = torch.empty(dim, dim, dtype=dtype)
        if generator is None:
            nn.init.xavier_uniform_(w1)
        else:
            # xavier uniform with an explicit generator for reproducibility
            bound = (6.0 / (dim + dim)) ** 0.5
            w1.uniform_(-bound, bound, generator=generator)
        self.w1 = nn.Parameter(w1)
        self.b1 = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.w2 = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, v: Tensor) -> Tensor:
        hidden = torch.nn.functional.gelu(v @ self.w1 + self.b1)
        return unit_rows(v + hidden @ self.w2 + self.b2)


class DecompositionHeads(nn.Module):
    """The state head f_s and object head f_o."""

    def __init__(self, dim: int, dtype: torch.dtype = torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.f_s = DecompositionHead(dim, dtype=dtype, generator=generator)
        self.f_o = DecompositionHead(dim, dtype=dtype, generator=generator)


@dataclass
class RecomposedLogits:
    h_state: Tensor   # (..., S)
    h_object: Tensor  # (..., O)
    h_rc: Tensor      # (..., S, O)


def grouped_primitive_means(means: Tensor, class_list: list[Pair], num_states: int,
                            num_objects: int, renormalize: bool = True) -> tuple[Tensor, Tensor]:
    """Average class means over the compositions sharing each primitive.

    Renormalization keeps cosines comparable across group sizes.
    """
    dim = means.shape[1]
    dtype = means.dtype
    s_idx = torch.as_tensor([p[0] for p in class_list], dtype=torch.long)
    o_idx = torch.as_tensor([p[1] for p in class_list], dtype=torch.long)
    state_count = torch.bincount(s_idx, minlength=num_states)
    object_count = torch.bincount(o_idx, minlength=num_objects)
    if (state_count == 0).any():
        missing = int((state_count == 0).nonzero()[0])
        raise ValidationError(f"state {missing} is covered by no composition in the class list")
    if (object_count == 0).any():
        missing = int((object_count == 0).nonzero()[0])
        raise ValidationError(f"object {missing} is covered by no composition in the class list")
    state_means = torch.zeros(num_states, dim, dtype=dtype).index_add(0, s_idx, means)
    object_means = torch.zeros(num_objects, dim, dtype=dtype).index_add(0, o_idx, means)
    state_means = state_means / state_count.to(dtype)[:, None]
    object_means = object_means / object_count.to(dtype)[:, None]
    if renormalize:
        state_means = unit_rows(state_means)
        object_means = unit_rows(object_means)
    return state_means, object_means


def primitive_logits(v: Tensor, heads: DecompositionHeads, means: Tensor,
                     class_list: list[Pair], num_states: int,
                     num_objects: int) -> tuple[Tensor, Tensor]:
    """Cosines of the decomposed image features against grouped text means.

    v: (B, d) unit rows. Returns h_state (B, S) and h_object (B, O).
    """
    state_means, object_means = grouped_primitive_means(
        means, class_list, num_states, num_objects
    )
    fs_v = heads.f_s(v)
    fo_v = heads.f_o(v)
    h_state = torch.clamp(fs_v @ state_means.T, -1.0, 1.0)
    h_object = torch.clamp(fo_v @ object_means.T, -1.0, 1.0)
    return h_state, h_object


def recompose(h_state: Tensor, h_object: Tensor) -> RecomposedLogits:
    """Cartesian sum: h_rc[..., i, j] = h_state[..., i] + h_object[..., j]."""
    if h_state.shape[:-1] != h_object.shape[:-1]:
        raise ValidationError(
            f"batch shapes differ: {tuple(h_state.shape)} vs {tuple(h_object.shape)}"
        )
    h_rc = h_state.unsqueeze(-1) + h_object.unsqueeze(-2)
    return RecomposedLogits(h_state, h_object, h_rc)


def gather_recomposed(h_rc: Tensor, class_list: list[Pair]) -> Tensor:
    """Pick the recomposed logit of each listed composition: (..., C)."""
    s_idx = torch.as_tensor([p[0] for p in class_list], dtype=torch.long)
    o_idx = torch.as_tensor([p[1] for p in class_list], dtype=torch.long)
    return h_rc[..., s_idx, o_idx]
