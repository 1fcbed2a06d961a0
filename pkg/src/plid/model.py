"""Model assembly: learnable modules plus per-dataset constants.

`CompositionModel` owns everything trainable (soft prompt, the two
cross-attention enhancers, the decomposition heads) around the frozen
projection buffer. `ModelBundle` binds a model to a dataset, an image
backend, and the cached constants derived from frozen encoders (description
embeddings, covariance margins, image features), and exposes the forward
computations used by both the trainer and the evaluator.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .config import TrainConfig
from .corpus import Dataset, Pair, generate_descriptions
from .decomposition import (DecompositionHeads, gather_recomposed,
                            grouped_primitive_means, recompose)
from .distributions import (ClassDistributionSet, CrossAttentionEnhancer,
                            MarginTensor, SharedMarginTensor, SoftPrompt,
                            build_distribution_set, margin_tensor,
                            primitive_distributions, share_covariance,
                            unit_rows)
from .encoders import (ArrayBackend, SyntheticImageBackend, TextEncoder,
                       TokenLexicon, load_precomputed_backend,
                       load_precomputed_descriptions)
from .errors import ValidationError
from .objective import LogitBundle, csp_logits, mix_logits

WORKERS_ENV = "PLID_NUM_WORKERS"


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


class CompositionModel(nn.Module):
    """All learnable tensors; the encoder projection is a frozen buffer."""

    def __init__(self, vocab, text_encoder: TextEncoder, config: TrainConfig,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(config.seed)
        self.prompt = SoftPrompt.initialize(
            vocab, text_encoder.lexicon, length=config.prompt_length, dtype=dtype
        )
        self.text_enhancer = CrossAttentionEnhancer(
            config.embed_dim, dropout=config.attention_dropout, dtype=dtype
        )
        self.visual_enhancer = CrossAttentionEnhancer(
            config.embed_dim, dropout=config.attention_dropout, dtype=dtype
        )
        self.heads = DecompositionHeads(config.embed_dim, dtype=dtype, generator=gen)
        self.register_buffer(
            "projection", torch.as_tensor(text_encoder.projection.copy(), dtype=dtype)
        )

    def encode_sequences(self, seqs: Tensor) -> Tensor:
        """Mean-pool token rows, project, unit-normalize: (B, T, d_tok) -> (B, d)."""
        return unit_rows(seqs.mean(dim=1) @ self.projection.T)

    def class_means(self, class_pairs: Tensor, desc_embeds: Tensor) -> Tensor:
        """Enhanced class embeddings t_y for (C, 2) id pairs with (C, M, d) support."""
        seqs = self.prompt.compose(class_pairs[:, 0], class_pairs[:, 1])
        q = self.encode_sequences(seqs)
        return self.text_enhancer(q, desc_embeds)

    def image_features(self, anchors: Tensor, views: Tensor) -> Tensor:
        """Enhanced visual features over the anchor-plus-views support set."""
        support = torch.cat([anchors.unsqueeze(1), views], dim=1)
        return self.visual_enhancer(anchors, support)


@dataclass
class MarginSet:
    """Constant margin tensors for one class list (plus the primitive spaces)."""

    compositional: MarginTensor | SharedMarginTensor
    state: MarginTensor
    object: MarginTensor
    shared: bool


class ModelBundle:
    """A model bound to a dataset, image backend, and frozen-encoder constants."""

    def __init__(self, dataset: Dataset, config: TrainConfig, backend="synthetic",
                 dtype: torch.dtype = torch.float32, parameters: dict | None = None):
        self.dataset = dataset
        self.config = config
        self.dtype = dtype
        self.vocab = dataset.vocab
        self.lexicon = TokenLexicon(config.embed_dim, config.encoder_seed)
        self.text_encoder = TextEncoder(self.lexicon, config.embed_dim)
        self.backend = self._make_backend(backend)
        self.class_list: list[Pair] = dataset.split.seen_ordered()
        self.class_index = {pair: i for i, pair in enumerate(self.class_list)}
        self.class_pairs = torch.as_tensor(self.class_list, dtype=torch.long)
        self.model = CompositionModel(self.vocab, self.text_encoder, config, dtype=dtype)
        if parameters is not None:
            self.load_parameters(parameters)
        self._desc_cache: dict[Pair, np.ndarray] = {}
        self._feature_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.desc_embeds = self.description_embeddings(self.class_list)
        self._margins: MarginSet | None = None

    # -- construction helpers ------------------------------------------------

    def _make_backend(self, backend):
        if backend == "synthetic":
            return SyntheticImageBackend(
                self.vocab, self.text_encoder, self.dataset.samples,
                image_noise=self.config.image_noise,
                view_noise=self.config.view_noise,
                latent_skew=self.config.latent_skew,
            )
        if backend == "precomputed":
            if self.dataset.root is None:
                raise ValidationError("precomputed backend needs a dataset directory")
            return load_precomputed_backend(
                self.dataset.root, self.dataset.samples, self.config.embed_dim,
                view_noise=self.config.view_noise, seed=self.config.encoder_seed,
            )
        if isinstance(backend, (SyntheticImageBackend, ArrayBackend)):
            return backend
        raise ValidationError(f"unknown backend {backend!r}")

    def load_parameters(self, parameters: dict[str, np.ndarray]) -> None:
        state = self.model.state_dict()
        tensors = {}
        for name, current in state.items():
            if name == "projection":
                tensors[name] = current
                continue
            if name not in parameters:
                raise ValidationError(f"checkpoint is missing parameter {name}")
            arr = np.asarray(parameters[name])
            if tuple(arr.shape) != tuple(current.shape):
                raise ValidationError(
                    f"checkpoint parameter {name} has shape {arr.shape}, expected {tuple(current.shape)}"
                )
            tensors[name] = torch.as_tensor(arr, dtype=self.dtype).reshape(current.shape)
        self.model.load_state_dict(tensors)

    def export_parameters(self) -> dict[str, np.ndarray]:
        return {
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in self.model.state_dict().items()
            if name != "projection"
        }

    # -- frozen-encoder constants ---------------------------------------------

    def _encode_description_block(self, pair: Pair, allow_synthesis: bool) -> np.ndarray:
        texts = self.dataset.corpus.texts.get(pair)
        if texts is None:
            if not allow_synthesis:
                raise ValidationError(f"composition {pair} has no descriptions")
            m = self.dataset.corpus.descriptions_per_pair or self.config.descriptions_per_class
            texts = tuple(sorted(generate_descriptions(
                self.vocab.states[pair[0]], self.vocab.objects[pair[1]],
                m, self.config.encoder_seed, pair[0], pair[1],
            )))
        if self.backend.name == "precomputed" and pair in self._stored_desc_pairs():
            return load_precomputed_descriptions(self.dataset.root, pair, self.config.embed_dim)
        return np.stack([self.text_encoder.encode_text(t) for t in texts])

    def _stored_desc_pairs(self) -> set[Pair]:
        if not hasattr(self, "_stored_pairs"):
            root = self.dataset.root
            self._stored_pairs = set()
            if root is not None:
                for path in root.glob("text_desc_*_*.mat"):
                    parts = path.stem.split("_")
                    self._stored_pairs.add((int(parts[-2]), int(parts[-1])))
        return self._stored_pairs

    def description_embeddings(self, pairs: list[Pair], allow_synthesis: bool = False) -> Tensor:
        """Stacked per-class description embeddings (len(pairs), M, d)."""
        missing = [p for p in pairs if p not in self._desc_cache]
        if missing:
            workers = _num_workers()
            if workers > 1 and len(missing) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    blocks = list(pool.map(
                        lambda p: self._encode_description_block(p, allow_synthesis), missing
                    ))
            else:
                blocks = [self._encode_description_block(p, allow_synthesis) for p in missing]
            for pair, block in zip(missing, blocks):
                self._desc_cache[pair] = block
        lengths = {self._desc_cache[p].shape[0] for p in pairs}
        if len(lengths) > 1:
            raise ValidationError(f"unequal description counts across classes: {sorted(lengths)}")
        stacked = np.stack([self._desc_cache[p] for p in pairs])
        return torch.as_tensor(stacked, dtype=self.dtype)

    def sample_features(self, keys: list[str]) -> tuple[Tensor, Tensor]:
        """Anchor and view embeddings for a batch of image keys."""
        n = self.config.views_per_image
        for key in keys:
            if key not in self._feature_cache:
                iv = self.backend.image_views(key, n)
                self._feature_cache[key] = (iv.anchor, iv.views)
        anchors = np.stack([self._feature_cache[k][0] for k in keys])
        views = np.stack([self._feature_cache[k][1] for k in keys])
        return (
            torch.as_tensor(anchors, dtype=self.dtype),
            torch.as_tensor(views, dtype=self.dtype),
        )

    # -- distributions and margins ---------------------------------------------

    def class_distributions(self, means: Tensor | None = None) -> ClassDistributionSet:
        """Distribution set over the seen classes for the current parameters.

        Computed in eval mode under no_grad: the covariance depends only on
        the frozen description offsets, so gradients and dropout draws would
        be wasted here.
        """
        if means is None:
            was_training = self.model.training
            self.model.eval()
            try:
                with torch.no_grad():
                    means = self.model.class_means(self.class_pairs, self.desc_embeds)
            finally:
                if was_training:
                    self.model.train()
        return build_distribution_set(means, self.desc_embeds)

    def build_margins(self) -> MarginSet:
        """Margin tensors; constant while the description corpus is fixed."""
        dist = self.class_distributions()
        shared = len(self.class_list) > self.config.dense_cov_limit
        if shared:
            comp = share_covariance(dist, self.class_list, self.vocab.num_objects).margins()
        else:
            comp = margin_tensor(dist)
        state_set, object_set = primitive_distributions(
            dist, self.class_list, self.vocab.num_states, self.vocab.num_objects
        )
        return MarginSet(
            compositional=comp,
            state=margin_tensor(state_set),
            object=margin_tensor(object_set),
            shared=shared,
        )

    def margins(self, refresh: bool = False) -> MarginSet:
        if self._margins is None or refresh or self.config.recompute_every_step:
            self._margins = self.build_margins()
        return self._margins

    # -- forward passes ----------------------------------------------------------

    def forward_batch(self, keys: list[str], state_ids: Tensor, object_ids: Tensor,
                      lam: float) -> tuple[LogitBundle, Tensor, Tensor, Tensor, Tensor]:
        """Training forward pass over the seen classes.

        Returns the logit bundle plus the tensors the loss needs for margins:
        the enhanced image feature and both decomposed features, and the
        per-sample class target indices.
        """
        cfg = self.config
        anchors, views = self.sample_features(keys)
        v = self.model.image_features(anchors, views)
        t = self.model.class_means(self.class_pairs, self.desc_embeds)
        h_comp = csp_logits(v, t)
        targets = torch.as_tensor(
            [self.class_index[(int(s), int(o))] for s, o in zip(state_ids, object_ids)],
            dtype=torch.long,
        )
        fs_v = self.model.heads.f_s(v)
        fo_v = self.model.heads.f_o(v)
        state_means, object_means = grouped_primitive_means(
            t, self.class_list, self.vocab.num_states, self.vocab.num_objects
        )
        h_state = torch.clamp(fs_v @ state_means.T, -1.0, 1.0)
        h_object = torch.clamp(fo_v @ object_means.T, -1.0, 1.0)
        rc = recompose(h_state, h_object)
        h_rc_flat = gather_recomposed(rc.h_rc, self.class_list)
        effective_lam = lam if cfg.use_decomposition else 0.0
        h_mixed = mix_logits(h_comp, h_rc_flat, effective_lam)
        bundle = LogitBundle(
            h_comp=h_comp, h_rc_flat=h_rc_flat, h_mixed=h_mixed,
            h_state=h_state, h_object=h_object, lambda_used=effective_lam,
        )
        return bundle, v, fs_v, fo_v, targets

    def batch_margins(self, v: Tensor, fs_v: Tensor, fo_v: Tensor, targets: Tensor,
                      state_ids: Tensor, object_ids: Tensor,
                      margin_set: MarginSet) -> tuple[Tensor, Tensor, Tensor]:
        """Per-sample margin rows for the three losses.

        Compositional margins follow the bound exactly (quadratic form divided
        by 2 tau, with the softmax dividing by tau again); primitive margins
        are the bare quadratic form.
        """
        cfg = self.config
        if not cfg.use_lid_margins:
            zeros = torch.zeros_like(v[:, :1])
            return (
                zeros.expand(v.shape[0], len(self.class_list)).clone(),
                zeros.expand(v.shape[0], self.vocab.num_states).clone(),
                zeros.expand(v.shape[0], self.vocab.num_objects).clone(),
            )
        comp = margin_set.compositional.batch_quadratic(v, targets, 1.0 / (2.0 * cfg.tau))
        state = margin_set.state.batch_quadratic(fs_v, state_ids, 1.0)
        obj = margin_set.object.batch_quadratic(fo_v, object_ids, 1.0)
        return comp, state, obj

    def score_candidates(self, keys: list[str], candidates: list[Pair],
                         mix_weight: float | None = None,
                         allow_synthesis: bool = False) -> np.ndarray:
        """Evaluation-mode fused logits (len(keys), len(candidates)).

        logits = (1 - w) * cosine + w * recomposed, with w the Beta prior mean
        unless overridden. Dropout is disabled.
        """
        cfg = self.config
        if mix_weight is None:
            a, b = cfg.beta_prior
            mix_weight = a / (a + b) if cfg.use_decomposition else 0.0
        was_training = self.model.training
        self.model.eval()
        try:
            cand_desc = self.description_embeddings(candidates, allow_synthesis=allow_synthesis)
            cand_pairs = torch.as_tensor(candidates, dtype=torch.long)
            with torch.no_grad():
                cand_means = self.model.class_means(cand_pairs, cand_desc)
                seen_means = self.model.class_means(self.class_pairs, self.desc_embeds)
                state_means, object_means = grouped_primitive_means(
                    seen_means, self.class_list, self.vocab.num_states, self.vocab.num_objects
                )
                out = []
                for start in range(0, len(keys), 256):
                    chunk = keys[start : start + 256]
                    anchors, views = self.sample_features(chunk)
                    v = self.model.image_features(anchors, views)
                    h_comp = csp_logits(v, cand_means)
                    fs_v = self.model.heads.f_s(v)
                    fo_v = self.model.heads.f_o(v)
                    h_state = torch.clamp(fs_v @ state_means.T, -1.0, 1.0)
                    h_object = torch.clamp(fo_v @ object_means.T, -1.0, 1.0)
                    rc = recompose(h_state, h_object)
                    h_rc = gather_recomposed(rc.h_rc, candidates)
                    mixed = mix_logits(h_comp, h_rc, mix_weight)
                    out.append(mixed.double().numpy())
            return np.concatenate(out, axis=0)
        finally:
            if was_training:
                self.model.train()
