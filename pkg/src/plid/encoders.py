"""Deterministic surrogate encoders standing in for frozen CLIP.

Text side: whitespace tokens map to fixed vectors drawn once from a hash-seeded
generator; a sequence encodes as L2-normalize(P @ meanpool(tokens)) with a
fixed semi-orthogonal projection P. Image side: the synthetic backend derives a
latent vector from the sample's state and object names plus per-key noise and
encodes it through the same projection, so the two modalities start aligned
the way pretrained encoders would be. A precomputed backend ingests real
embeddings from matrix containers instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SampleRecord, Vocabulary
from .errors import LoadError, ValidationError
from .matrixio import read_matrix

CONTEXT_LENGTH = 77
NORM_FLOOR = 1e-8


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize rows, clamping the norm at NORM_FLOOR instead of erroring."""
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norm, NORM_FLOOR)


def _hash_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass(frozen=True)
class TokenSequence:
    """Token embedding rows for one text, truncated to the context length."""

    vectors: np.ndarray  # (n_tokens, d_tok)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValidationError("token sequence must be a non-empty (n, d_tok) array")
        if self.vectors.shape[0] > CONTEXT_LENGTH:
            raise ValidationError(f"token sequence longer than context length {CONTEXT_LENGTH}")


class TokenLexicon:
    """Fixed token-to-vector table; vectors are seeded-hash draws, cached per token."""

    def __init__(self, dim: int, seed: int):
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        key = token.lower()
        vec = self._cache.get(key)
        if vec is None:
            rng = _hash_rng(self.seed, "tok", key)
            vec = rng.standard_normal(self.dim) / np.sqrt(self.dim)
            vec.flags.writeable = False
            self._cache[key] = vec
        return vec


def embed_tokens(text: str, lexicon: TokenLexicon) -> TokenSequence:
    """Map whitespace tokens of `text` to their fixed vectors."""
    tokens = text.split()
    if not tokens:
        raise ValidationError("cannot embed empty text")
    tokens = tokens[:CONTEXT_LENGTH]
    return TokenSequence(np.stack([lexicon.vector(t) for t in tokens]))


def _semi_orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, _ = np.linalg.qr(g)
    q = q[: max(rows, cols), : min(rows, cols)]
    return q if rows >= cols else q.T


class TextEncoder:
    """Mean-pool + fixed projection + normalize; linear before the normalization.

    The projection has orthonormal rows so token-space geometry survives the
    map. `projection` is exposed read-only so callers can share it (the
    synthetic image backend does) and tests can recompute encodings.
    """

    def __init__(self, lexicon: TokenLexicon, embed_dim: int):
        self.lexicon = lexicon
        self.embed_dim = int(embed_dim)
        rng = _hash_rng(lexicon.seed, "proj", lexicon.dim, embed_dim)
        self.projection = _semi_orthogonal(embed_dim, lexicon.dim, rng)
        self.projection.flags.writeable = False

    def encode(self, seq: TokenSequence) -> np.ndarray:
        pooled = seq.vectors.mean(axis=0)
        return l2_normalize(self.projection @ pooled)

    def encode_text(self, text: str) -> np.ndarray:
        return self.encode(embed_tokens(text, self.lexicon))

    def primitive_embedding(self, name: str) -> np.ndarray:
        """Embedding of a bare primitive name; used by feasibility calibration."""
        return self.encode_text(name)


@dataclass(frozen=True)
class ImageViews:
    anchor: np.ndarray          # (d,)
    views: np.ndarray           # (n_views, d); may have zero rows

    def support(self) -> np.ndarray:
        """Anchor plus views, stacked: the cross-attention support set."""
        return np.concatenate([self.anchor[None, :], self.views], axis=0)


class SyntheticImageBackend:
    """Images as deterministic latents: token vectors of the pair's names, a
    per-primitive skew component, and per-key Gaussian noise, projected and
    normalized. `latent_skew` controls how far image-side primitives sit from
    their text-side token vectors, i.e. how much training has to learn."""

    name = "synthetic"

    def __init__(self, vocab: Vocabulary, text_encoder: TextEncoder,
                 samples: list[SampleRecord], image_noise: float = 0.1,
                 view_noise: float = 0.05, latent_skew: float = 0.5):
        self.vocab = vocab
        self.encoder = text_encoder
        self.image_noise = float(image_noise)
        self.view_noise = float(view_noise)
        self.latent_skew = float(latent_skew)
        self._labels = {s.image_key: s.pair for s in samples}
        if len(self._labels) != len(samples):
            raise ValidationError("duplicate image keys in sample manifest")
        lex = text_encoder.lexicon
        self._state_latents = np.stack([
            self._primitive_latent("state", n, lex) for n in vocab.states])
        self._object_latents = np.stack([
            self._primitive_latent("object", n, lex) for n in vocab.objects])

    def _primitive_latent(self, kind: str, name: str, lex: TokenLexicon) -> np.ndarray:
        base = np.mean([lex.vector(t) for t in name.split()], axis=0)
        skew = _hash_rng(lex.seed, "skew", kind, name.lower()).standard_normal(lex.dim) / np.sqrt(lex.dim)
        return base + self.latent_skew * skew

    def latent(self, key: str) -> np.ndarray:
        try:
            s, o = self._labels[key]
        except KeyError:
            raise LoadError(f"unknown image key: {key}") from None
        eta = _hash_rng(self.encoder.lexicon.seed, "img", key).standard_normal(self.encoder.lexicon.dim)
        return self._state_latents[s] + self._object_latents[o] + self.image_noise * eta

    def encode_image(self, key: str) -> np.ndarray:
        return l2_normalize(self.encoder.projection @ self.latent(key))

    def image_views(self, key: str, n_views: int, seed: int = 0) -> ImageViews:
        """Anchor embedding plus n seeded perturbations of its latent, re-encoded."""
        if n_views < 0:
            raise ValidationError("n_views must be >= 0")
        latent = self.latent(key)
        anchor = l2_normalize(self.encoder.projection @ latent)
        if n_views == 0:
            return ImageViews(anchor, np.zeros((0, anchor.shape[0])))
        dim = latent.shape[0]
        views = []
        for i in range(n_views):
            nu = _hash_rng(self.encoder.lexicon.seed, "view", key, seed, i).standard_normal(dim)
            views.append(l2_normalize(self.encoder.projection @ (latent + self.view_noise * nu)))
        return ImageViews(anchor, np.stack(views))


class ArrayBackend:
    """In-memory precomputed embeddings keyed by image key; views perturb the
    embedding itself (no latent is available) and renormalize."""

    name = "array"

    def __init__(self, embeddings: dict[str, np.ndarray], view_noise: float = 0.05, seed: int = 0):
        self._table = {k: l2_normalize(np.asarray(v, dtype=np.float64)) for k, v in embeddings.items()}
        self.view_noise = float(view_noise)
        self.seed = int(seed)

    def encode_image(self, key: str) -> np.ndarray:
        try:
            return self._table[key]
        except KeyError:
            raise LoadError(f"unknown image key: {key}") from None

    def image_views(self, key: str, n_views: int, seed: int = 0) -> ImageViews:
        anchor = self.encode_image(key)
        if n_views < 0:
            raise ValidationError("n_views must be >= 0")
        if n_views == 0:
            return ImageViews(anchor, np.zeros((0, anchor.shape[0])))
        views = []
        for i in range(n_views):
            nu = _hash_rng(self.seed, "embview", key, seed, i).standard_normal(anchor.shape[0])
            views.append(l2_normalize(anchor + self.view_noise * nu))
        return ImageViews(anchor, np.stack(views))


def load_precomputed_backend(root: str | Path, samples: list[SampleRecord],
                             embed_dim: int, view_noise: float = 0.05,
                             seed: int = 0) -> ArrayBackend:
    """Ingest img_<split>.mat containers aligned with samples.csv row order."""
    root = Path(root)
    table: dict[str, np.ndarray] = {}
    by_split: dict[str, list[SampleRecord]] = {}
    for rec in samples:
        by_split.setdefault(rec.split, []).append(rec)
    for split_name, recs in by_split.items():
        mat = read_matrix(root / f"img_{split_name}.mat")
        if mat.shape != (len(recs), embed_dim):
            raise ValidationError(
                f"img_{split_name}.mat has shape {mat.shape}, expected ({len(recs)}, {embed_dim})"
            )
        for rec, row in zip(recs, mat):
            table[rec.image_key] = row.astype(np.float64)
    return ArrayBackend(table, view_noise=view_noise, seed=seed)


def load_precomputed_descriptions(root: str | Path, pair: tuple[int, int],
                                  embed_dim: int) -> np.ndarray:
    """Read the text_desc_<s>_<o>.mat container for one composition."""
    mat = read_matrix(Path(root) / f"text_desc_{pair[0]}_{pair[1]}.mat")
    if mat.shape[1] != embed_dim:
        raise ValidationError(
            f"text_desc_{pair[0]}_{pair[1]}.mat has width {mat.shape[1]}, expected {embed_dim}"
        )
    return l2_normalize(mat.astype(np.float64))


def cosine_similarity_tables(vocab: Vocabulary, encoder: TextEncoder) -> dict[str, np.ndarray]:
    """State-state and object-object cosine similarity over name embeddings."""
    s = np.stack([encoder.primitive_embedding(n) for n in vocab.states])
    o = np.stack([encoder.primitive_embedding(n) for n in vocab.objects])
    return {"state": s @ s.T, "object": o @ o.T}


def augment_views(backend, key: str, n_views: int, seed: int = 0) -> ImageViews:
    """Backend-dispatching convenience wrapper for view augmentation."""
    return backend.image_views(key, n_views, seed)
