"""Scikit-learn style facade over the compositional zero-shot pipeline.

`CompositionalZeroShotClassifier` consumes precomputed image embeddings as X
and (state_id, object_id) pairs as y, so it composes with the usual
estimator tooling (get_params / set_params / clone, grid search over the
numeric hyperparameters). The compositions present in y form the seen set;
an optional validation split drives model selection exactly as the training
CLI does. Class descriptions may be supplied per composition, or are
synthesized from templates when omitted.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .corpus import CompositionSplit, Dataset, DescriptionCorpus, SampleRecord, Vocabulary
from .encoders import ArrayBackend
from .errors import ValidationError
from .model import ModelBundle
from .training import train
from .validation import check_embeddings, check_pair_labels


class CompositionalZeroShotClassifier(BaseEstimator):
    """Learns prompt-distribution classifiers over state-object compositions.

    Parameters mirror the training configuration; `states`, `objects` and
    `descriptions` define the label space (generic names and template
    descriptions are generated when omitted).
    """

    def __init__(self, states=None, objects=None, descriptions=None, epochs=20,
                 base_lr=5e-5, weight_decay=2e-5, batch_size=64, lr_decay_factor=0.5,
                 lr_decay_every=5, seed=0, prompt_length=8, attention_dropout=0.1,
                 descriptions_per_class=16, views_per_image=4, beta_prior=(1.0, 9.0),
                 tau=0.01, primitive_loss_weight=0.1, dense_cov_limit=512,
                 use_lid_margins=True, use_decomposition=True, view_noise=0.05,
                 encoder_seed=101, bias_grid_size=41):
        self.states = states
        self.objects = objects
        self.descriptions = descriptions
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.seed = seed
        self.prompt_length = prompt_length
        self.attention_dropout = attention_dropout
        self.descriptions_per_class = descriptions_per_class
        self.views_per_image = views_per_image
        self.beta_prior = beta_prior
        self.tau = tau
        self.primitive_loss_weight = primitive_loss_weight
        self.dense_cov_limit = dense_cov_limit
        self.use_lid_margins = use_lid_margins
        self.use_decomposition = use_decomposition
        self.view_noise = view_noise
        self.encoder_seed = encoder_seed
        self.bias_grid_size = bias_grid_size

    # ------------------------------------------------------------------

    def _vocabulary(self, y: np.ndarray, y_val: np.ndarray | None) -> Vocabulary:
        labels = y if y_val is None else np.concatenate([y, y_val])
        if self.states is not None:
            states = tuple(self.states)
        else:
            states = tuple(f"state{i}" for i in range(int(labels[:, 0].max()) + 1))
        if self.objects is not None:
            objects = tuple(self.objects)
        else:
            objects = tuple(f"object{i}" for i in range(int(labels[:, 1].max()) + 1))
        return Vocabulary(states, objects)

    def _corpus(self, vocab: Vocabulary, pairs: set) -> DescriptionCorpus:
        from .corpus import generate_descriptions

        if self.descriptions is not None:
            texts = {tuple(k): tuple(sorted(v)) for k, v in self.descriptions.items()}
            missing = [p for p in pairs if p not in texts]
            if missing:
                raise ValidationError(f"descriptions missing for compositions: {sorted(missing)}")
        else:
            texts = {
                pair: tuple(sorted(generate_descriptions(
                    vocab.states[pair[0]], vocab.objects[pair[1]],
                    self.descriptions_per_class, self.encoder_seed, pair[0], pair[1])))
                for pair in pairs
            }
        corpus = DescriptionCorpus(texts)
        corpus.validate(pairs)
        return corpus

    def _config(self, embed_dim: int, m: int) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every, seed=self.seed, embed_dim=embed_dim,
            prompt_length=self.prompt_length, attention_dropout=self.attention_dropout,
            descriptions_per_class=m, views_per_image=self.views_per_image,
            beta_prior=tuple(self.beta_prior), tau=self.tau,
            primitive_loss_weight=self.primitive_loss_weight,
            dense_cov_limit=self.dense_cov_limit, encoder_seed=self.encoder_seed,
            view_noise=self.view_noise, use_lid_margins=self.use_lid_margins,
            use_decomposition=self.use_decomposition, bias_grid_size=self.bias_grid_size,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on image embeddings X and composition labels y.

        The unique pairs in y become the seen compositions. When a validation
        set is supplied, pairs exclusive to y_val act as unseen validation
        classes and the best-validation-AUC epoch is kept; otherwise the final
        epoch wins.
        """
        X = check_embeddings(X)
        y = check_pair_labels(y)
        if X.shape[0] != y.shape[0]:
            raise ValidationError("X and y disagree on the number of samples")
        if X_val is not None:
            X_val = check_embeddings(X_val, expected_dim=X.shape[1])
            y_val = check_pair_labels(y_val)
            if X_val.shape[0] != y_val.shape[0]:
                raise ValidationError("X_val and y_val disagree on the number of samples")
        vocab = self._vocabulary(y, y_val if X_val is not None else None)
        y = check_pair_labels(y, vocab.num_states, vocab.num_objects)

        seen = {(int(s), int(o)) for s, o in y}
        unseen_val = set()
        if X_val is not None:
            y_val = check_pair_labels(y_val, vocab.num_states, vocab.num_objects)
            unseen_val = {(int(s), int(o)) for s, o in y_val} - seen
        split = CompositionSplit(frozenset(seen), frozenset(unseen_val), frozenset())
        split.validate(vocab)
        corpus = self._corpus(vocab, seen | unseen_val)

        embeddings: dict[str, np.ndarray] = {}
        samples: list[SampleRecord] = []
        for i, (row, (s, o)) in enumerate(zip(X, y)):
            key = f"fit_{i:06d}"
            embeddings[key] = row
            samples.append(SampleRecord(key, int(s), int(o), "train"))
        if X_val is not None:
            for i, (row, (s, o)) in enumerate(zip(X_val, y_val)):
                key = f"val_{i:06d}"
                embeddings[key] = row
                samples.append(SampleRecord(key, int(s), int(o), "val"))

        backend = ArrayBackend(embeddings, view_noise=self.view_noise, seed=self.encoder_seed)
        dataset = Dataset(vocab, split, corpus, samples)
        config = self._config(X.shape[1], corpus.descriptions_per_pair)

        checkpoint = train(dataset, config, backend=backend)
        self.checkpoint_ = checkpoint
        self.config_ = config
        self.vocabulary_ = vocab
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array(sorted(vocab.all_pairs()), dtype=np.int64)
        self._backend = backend
        self._bundle = ModelBundle(dataset, config, backend=backend,
                                   parameters=checkpoint.parameters)
        self._query_count = 0
        return self

    # ------------------------------------------------------------------

    def _score_matrix(self, X, candidates) -> tuple[np.ndarray, list]:
        check_is_fitted(self, "checkpoint_")
        X = check_embeddings(X, expected_dim=self.n_features_in_)
        if candidates is None:
            candidates = sorted(self.vocabulary_.all_pairs())
        else:
            candidates = [(int(s), int(o)) for s, o in candidates]
            for pair in candidates:
                self.vocabulary_.check_pair(pair, "candidates")
        keys = []
        for row in X:
            key = f"query_{self._query_count:08d}"
            self._query_count += 1
            self._backend._table[key] = row / max(np.linalg.norm(row), 1e-8)
            keys.append(key)
        logits = self._bundle.score_candidates(keys, candidates, allow_synthesis=True)
        return logits, candidates

    def decision_function(self, X, candidates=None) -> np.ndarray:
        """Fused logits against the candidate compositions (full product by
        default, ordered like `classes_`)."""
        logits, _ = self._score_matrix(X, candidates)
        return logits

    def predict(self, X, candidates=None) -> np.ndarray:
        """Predicted (state_id, object_id) pairs, shape (n_samples, 2)."""
        logits, candidates = self._score_matrix(X, candidates)
        picks = logits.argmax(axis=1)
        return np.array([candidates[i] for i in picks], dtype=np.int64)

    def score(self, X, y, candidates=None) -> float:
        """Exact-pair accuracy over the candidate set."""
        y = check_pair_labels(y, self.vocabulary_.num_states, self.vocabulary_.num_objects)
        preds = self.predict(X, candidates)
        return float((preds == y).all(axis=1).mean())
