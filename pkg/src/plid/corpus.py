"""Dataset layer: vocabularies, splits, description corpora, sample manifests.

On-disk layout of a dataset root::

    vocabulary.json            {"states": [...], "objects": [...]}
    splits.json                {"seen": [[s,o],...], "unseen_val": ..., "unseen_test": ...}
    descriptions/<s>_<o>.txt   one description per line, UTF-8
    samples.csv                image_key,state_id,object_id,split

All integer ids are positions in the vocabulary lists, which fixes the id
assignment to file order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import LoadError, ValidationError

Pair = tuple[int, int]

SPLIT_NAMES = ("train", "val", "test")

# Word pools for synthetic vocabularies. Single whitespace tokens on purpose,
# so primitive names map to single token vectors.
STATE_WORDS = [
    "red", "sliced", "wet", "old", "shiny", "broken", "ripe", "frozen",
    "painted", "rusty", "folded", "burnt", "huge", "tiny", "curved", "dark",
    "bright", "smooth", "cracked", "fresh", "dusty", "bent", "hollow", "thick",
]
OBJECT_WORDS = [
    "tomato", "car", "shoe", "table", "apple", "door", "bottle", "jacket",
    "bridge", "clock", "boat", "garden", "knife", "window", "carpet", "tower",
    "basket", "mirror", "fence", "wheel", "ceiling", "ladder", "lamp", "roof",
]


@dataclass(frozen=True)
class Vocabulary:
    """Ordered state and object name lists; list position is the integer id."""

    states: tuple[str, ...]
    objects: tuple[str, ...]

    def __post_init__(self):
        for kind, names in (("states", self.states), ("objects", self.objects)):
            if not names:
                raise ValidationError(f"vocabulary {kind} list is empty")
            if len(set(names)) != len(names):
                dupes = sorted({n for n in names if list(names).count(n) > 1})
                raise ValidationError(f"duplicate {kind} names: {dupes}")

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def pair_name(self, pair: Pair) -> str:
        return f"{self.states[pair[0]]} {self.objects[pair[1]]}"

    def check_pair(self, pair: Pair, where: str) -> None:
        s, o = pair
        if not (0 <= s < self.num_states and 0 <= o < self.num_objects):
            raise ValidationError(f"{where}: pair ({s},{o}) outside vocabulary bounds")

    def all_pairs(self) -> list[Pair]:
        return [(s, o) for s in range(self.num_states) for o in range(self.num_objects)]


@dataclass(frozen=True)
class CompositionSplit:
    """Seen / unseen-val / unseen-test composition pair sets."""

    seen: frozenset[Pair]
    unseen_val: frozenset[Pair]
    unseen_test: frozenset[Pair]

    def validate(self, vocab: Vocabulary) -> None:
        for name, pairs in self.as_dict().items():
            for p in pairs:
                vocab.check_pair(p, f"splits.{name}")
        for a, b in (("seen", "unseen_val"), ("seen", "unseen_test"), ("unseen_val", "unseen_test")):
            overlap = getattr(self, a) & getattr(self, b)
            if overlap:
                raise ValidationError(f"splits {a} and {b} overlap on {sorted(overlap)[0]}")
        covered_s = {s for s, _ in self.seen}
        covered_o = {o for _, o in self.seen}
        missing_s = sorted(set(range(vocab.num_states)) - covered_s)
        missing_o = sorted(set(range(vocab.num_objects)) - covered_o)
        if missing_s:
            raise ValidationError(
                f"state '{vocab.states[missing_s[0]]}' appears in no seen pair (untrainable)"
            )
        if missing_o:
            raise ValidationError(
                f"object '{vocab.objects[missing_o[0]]}' appears in no seen pair (untrainable)"
            )

    def as_dict(self) -> dict[str, frozenset[Pair]]:
        return {"seen": self.seen, "unseen_val": self.unseen_val, "unseen_test": self.unseen_test}

    def seen_ordered(self) -> list[Pair]:
        return sorted(self.seen)

    def closed_world_candidates(self, partition: str = "test") -> list[Pair]:
        """Seen plus the unseen pairs of the given evaluation partition, sorted."""
        unseen = self.unseen_test if partition == "test" else self.unseen_val
        return sorted(self.seen | unseen)


@dataclass(frozen=True)
class DescriptionCorpus:
    """Per-composition description sentences, M per composition.

    Description lists are sorted lexicographically so the m-th description of
    one class pairs deterministically with the m-th of every other class when
    estimating cross-class covariance.
    """

    texts: dict[Pair, tuple[str, ...]] = field(default_factory=dict)

    @property
    def descriptions_per_pair(self) -> int:
        if not self.texts:
            return 0
        return len(next(iter(self.texts.values())))

    def validate(self, required: Iterable[Pair]) -> None:
        m = self.descriptions_per_pair
        if m < 1:
            raise ValidationError("description corpus is empty")
        for pair, lines in self.texts.items():
            if len(lines) != m:
                raise ValidationError(
                    f"composition {pair} has {len(lines)} descriptions, expected {m}"
                )
        for pair in required:
            if pair not in self.texts:
                raise ValidationError(f"composition {pair} has no descriptions")

    def get(self, pair: Pair) -> tuple[str, ...]:
        try:
            return self.texts[pair]
        except KeyError:
            raise ValidationError(f"composition {pair} has no descriptions") from None


@dataclass(frozen=True)
class SampleRecord:
    image_key: str
    state_id: int
    object_id: int
    split: str

    @property
    def pair(self) -> Pair:
        return (self.state_id, self.object_id)


@dataclass
class Dataset:
    """Bundle of the four load_dataset products plus the originating root."""

    vocab: Vocabulary
    split: CompositionSplit
    corpus: DescriptionCorpus
    samples: list[SampleRecord]
    root: Path | None = None

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        vocab, split, corpus, samples = load_dataset(root)
        return cls(vocab, split, corpus, samples, root=Path(root))

    def samples_of(self, split_name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == split_name]


# ---------------------------------------------------------------------------
# Loading and persistence


def _read_json(path: Path):
    if not path.is_file():
        raise LoadError(f"missing dataset file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed JSON in {path}: {exc}") from exc


def _pairs(raw, where: str) -> frozenset[Pair]:
    out = set()
    for entry in raw:
        if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
            raise ValidationError(f"{where}: entry {entry!r} is not an [s, o] pair")
        out.add((int(entry[0]), int(entry[1])))
    return frozenset(out)


def load_dataset(root: str | Path) -> tuple[Vocabulary, CompositionSplit, DescriptionCorpus, list[SampleRecord]]:
    """Load and validate a dataset directory.

    Raises LoadError naming any missing file and ValidationError naming the
    first offending entry for invariant violations.
    """
    root = Path(root)
    vocab_raw = _read_json(root / "vocabulary.json")
    vocab = Vocabulary(tuple(vocab_raw.get("states", ())), tuple(vocab_raw.get("objects", ())))

    split_raw = _read_json(root / "splits.json")
    split = CompositionSplit(
        _pairs(split_raw.get("seen", ()), "seen"),
        _pairs(split_raw.get("unseen_val", ()), "unseen_val"),
        _pairs(split_raw.get("unseen_test", ()), "unseen_test"),
    )
    split.validate(vocab)

    texts: dict[Pair, tuple[str, ...]] = {}
    needed = sorted(split.seen | split.unseen_val | split.unseen_test)
    for pair in needed:
        path = root / "descriptions" / f"{pair[0]}_{pair[1]}.txt"
        if not path.is_file():
            raise LoadError(f"missing dataset file: {path}")
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ValidationError(f"description file {path} is empty")
        texts[pair] = tuple(sorted(lines))
    corpus = DescriptionCorpus(texts)
    corpus.validate(needed)

    samples_path = root / "samples.csv"
    if not samples_path.is_file():
        raise LoadError(f"missing dataset file: {samples_path}")
    samples: list[SampleRecord] = []
    with open(samples_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for i, row in enumerate(reader):
            try:
                rec = SampleRecord(
                    image_key=row["image_key"],
                    state_id=int(row["state_id"]),
                    object_id=int(row["object_id"]),
                    split=row["split"],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"samples.csv row {i + 2}: {exc}") from exc
            vocab.check_pair(rec.pair, f"samples.csv row {i + 2}")
            if rec.split not in SPLIT_NAMES:
                raise ValidationError(f"samples.csv row {i + 2}: unknown split {rec.split!r}")
            if rec.split == "train" and rec.pair not in split.seen:
                raise ValidationError(
                    f"samples.csv row {i + 2}: train sample {rec.image_key} has unseen pair {rec.pair}"
                )
            samples.append(rec)
    return vocab, split, corpus, samples


def save_dataset(root: str | Path, vocab: Vocabulary, split: CompositionSplit,
                 corpus: DescriptionCorpus, samples: list[SampleRecord]) -> Path:
    """Persist a dataset in the canonical layout; overwrites existing files."""
    root = Path(root)
    (root / "descriptions").mkdir(parents=True, exist_ok=True)
    (root / "vocabulary.json").write_text(
        json.dumps({"states": list(vocab.states), "objects": list(vocab.objects)}, indent=2) + "\n",
        encoding="utf-8",
    )
    (root / "splits.json").write_text(
        json.dumps(
            {
                "seen": [list(p) for p in sorted(split.seen)],
                "unseen_val": [list(p) for p in sorted(split.unseen_val)],
                "unseen_test": [list(p) for p in sorted(split.unseen_test)],
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    for pair, lines in sorted(corpus.texts.items()):
        path = root / "descriptions" / f"{pair[0]}_{pair[1]}.txt"
        path.write_text("\n".join(sorted(lines)) + "\n", encoding="utf-8")
    with open(root / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_key", "state_id", "object_id", "split"])
        for rec in samples:
            writer.writerow([rec.image_key, rec.state_id, rec.object_id, rec.split])
    return root


# ---------------------------------------------------------------------------
# Synthetic dataset generation

_MEDIUMS = ["photo", "image", "picture", "snapshot"]
_OPENERS = ["The {m} features", "The {m} shows", "In the {m} there is", "The {m} captures"]
_FILLERS = [
    "a beautifully arranged", "a single", "a close view of a", "a clearly visible",
    "an ordinary", "a striking", "a carefully lit", "a somewhat blurry",
]
_SETTINGS = [
    "on a wooden table", "against a plain background", "outdoors in daylight",
    "in a cluttered room", "under warm light", "near a window", "in sharp focus",
    "seen from above",
]


def _u32(x: int) -> int:
    # SeedSequence entries must be non-negative integers.
    return int(x) & 0xFFFFFFFF


def _description_rng(seed: int, s: int, o: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_u32(seed), _u32(s), _u32(o), 0x5EED]))


def generate_descriptions(state: str, obj: str, count: int, seed: int,
                          state_id: int, object_id: int) -> list[str]:
    """Template sentences embedding the primitive names, with seeded synonym noise.

    Deterministic in all arguments; used both by the synthetic generator and
    by open-world scoring when a candidate has no stored descriptions.
    """
    rng = _description_rng(seed, state_id, object_id)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < count:
        medium = _MEDIUMS[rng.integers(len(_MEDIUMS))]
        opener = _OPENERS[rng.integers(len(_OPENERS))].format(m=medium)
        filler = _FILLERS[rng.integers(len(_FILLERS))]
        setting = _SETTINGS[rng.integers(len(_SETTINGS))]
        sentence = f"{opener} {filler} {state} {obj} {setting}."
        if sentence not in seen:
            seen.add(sentence)
            out.append(sentence)
        elif len(seen) >= len(_MEDIUMS) * len(_OPENERS) * len(_FILLERS) * len(_SETTINGS):
            out.append(sentence)  # template space exhausted; allow repeats
    return out


def _pick_seen_pairs(num_states: int, num_objects: int, count: int,
                     rng: np.random.Generator) -> list[Pair]:
    """Choose `count` seen pairs covering every state and object."""
    if count < max(num_states, num_objects):
        raise ValidationError(
            f"seen_fraction too small: {count} seen pairs cannot cover "
            f"{num_states} states and {num_objects} objects"
        )
    all_pairs = [(s, o) for s in range(num_states) for o in range(num_objects)]
    order = rng.permutation(len(all_pairs))
    chosen: list[Pair] = []
    chosen_set: set[Pair] = set()
    uncovered_s = set(range(num_states))
    uncovered_o = set(range(num_objects))
    # First pass: greedily cover primitives.
    for idx in order:
        if not uncovered_s and not uncovered_o:
            break
        s, o = all_pairs[idx]
        if s in uncovered_s or o in uncovered_o:
            chosen.append((s, o))
            chosen_set.add((s, o))
            uncovered_s.discard(s)
            uncovered_o.discard(o)
    if len(chosen) > count:
        raise ValidationError(
            f"seen_fraction too small: coverage needs {len(chosen)} pairs, budget is {count}"
        )
    for idx in order:
        if len(chosen) >= count:
            break
        pair = all_pairs[idx]
        if pair not in chosen_set:
            chosen.append(pair)
            chosen_set.add(pair)
    return sorted(chosen)


def make_synthetic_dataset(out_dir: str | Path, num_states: int, num_objects: int,
                           seen_fraction: float, samples_per_pair: int,
                           descriptions_per_pair: int, seed: int) -> Path:
    """Generate and persist a synthetic dataset; deterministic per seed.

    Seen pairs get their samples split roughly 70/15/15 across train/val/test;
    unseen pairs contribute all their samples to the val or test partition
    they belong to. Image keys encode the pair and an index; the synthetic
    image backend maps keys to latent vectors deterministically.
    """
    if num_states < 2 or num_objects < 2:
        raise ValidationError("need at least 2 states and 2 objects")
    if not (0.0 < seen_fraction <= 1.0):
        raise ValidationError(f"seen_fraction must be in (0, 1], got {seen_fraction}")
    if samples_per_pair < 1 or descriptions_per_pair < 1:
        raise ValidationError("samples_per_pair and descriptions_per_pair must be >= 1")

    states = [STATE_WORDS[i] if i < len(STATE_WORDS) else f"state{i}" for i in range(num_states)]
    objects = [OBJECT_WORDS[i] if i < len(OBJECT_WORDS) else f"object{i}" for i in range(num_objects)]
    vocab = Vocabulary(tuple(states), tuple(objects))

    rng = np.random.default_rng(np.random.SeedSequence([_u32(seed), 0xDA7A]))
    total = num_states * num_objects
    n_seen = int(round(seen_fraction * total))
    seen = _pick_seen_pairs(num_states, num_objects, n_seen, rng)
    unseen = [p for p in vocab.all_pairs() if p not in set(seen)]
    unseen = [unseen[i] for i in rng.permutation(len(unseen))]
    half = len(unseen) // 2
    unseen_val = sorted(unseen[:half])
    unseen_test = sorted(unseen[half:])
    split = CompositionSplit(frozenset(seen), frozenset(unseen_val), frozenset(unseen_test))
    split.validate(vocab)

    texts = {
        (s, o): tuple(sorted(generate_descriptions(
            vocab.states[s], vocab.objects[o], descriptions_per_pair, seed, s, o)))
        for (s, o) in sorted(split.seen | split.unseen_val | split.unseen_test)
    }
    corpus = DescriptionCorpus(texts)

    samples: list[SampleRecord] = []
    n_val = max(1, int(round(0.15 * samples_per_pair))) if samples_per_pair >= 3 else 0
    n_test = n_val
    for pair in sorted(vocab.all_pairs()):
        if pair in split.seen:
            assignments = ["train"] * (samples_per_pair - n_val - n_test) + ["val"] * n_val + ["test"] * n_test
        elif pair in split.unseen_val:
            assignments = ["val"] * samples_per_pair
        else:
            assignments = ["test"] * samples_per_pair
        for i, part in enumerate(assignments):
            key = f"img_s{pair[0]:03d}_o{pair[1]:03d}_{i:05d}"
            samples.append(SampleRecord(key, pair[0], pair[1], part))

    return save_dataset(out_dir, vocab, split, corpus, samples)


# ---------------------------------------------------------------------------
# Open-world feasibility

SimilarityTable = Mapping[str, np.ndarray]
SimilarityFn = Callable[[str, int, int], float]


def _similarity_arrays(vocab: Vocabulary,
                       primitive_similarity: SimilarityTable | SimilarityFn) -> tuple[np.ndarray, np.ndarray]:
    ns, no = vocab.num_states, vocab.num_objects
    if callable(primitive_similarity):
        s_sim = np.array([[primitive_similarity("state", i, j) for j in range(ns)] for i in range(ns)], dtype=np.float64)
        o_sim = np.array([[primitive_similarity("object", i, j) for j in range(no)] for i in range(no)], dtype=np.float64)
    else:
        s_sim = np.asarray(primitive_similarity["state"], dtype=np.float64)
        o_sim = np.asarray(primitive_similarity["object"], dtype=np.float64)
    if s_sim.shape != (ns, ns) or o_sim.shape != (no, no):
        raise ValidationError(
            f"similarity tables must be ({ns},{ns}) and ({no},{no}), got {s_sim.shape} and {o_sim.shape}"
        )
    if not (np.isfinite(s_sim).all() and np.isfinite(o_sim).all()):
        raise ValidationError("similarity tables must be finite for all primitive pairs")
    return s_sim, o_sim


def feasibility_scores(vocab: Vocabulary, split: CompositionSplit,
                       primitive_similarity: SimilarityTable | SimilarityFn) -> np.ndarray:
    """Feasibility score for every (state, object) pair.

    score(s, o) = 0.5 * [ max over objects o' co-occurring with s in seen pairs
    of sim(o, o') + max over states s' co-occurring with o of sim(s, s') ].
    """
    s_sim, o_sim = _similarity_arrays(vocab, primitive_similarity)
    objects_of_state: dict[int, list[int]] = {}
    states_of_object: dict[int, list[int]] = {}
    for s, o in split.seen:
        objects_of_state.setdefault(s, []).append(o)
        states_of_object.setdefault(o, []).append(s)
    scores = np.full((vocab.num_states, vocab.num_objects), -np.inf)
    for s in range(vocab.num_states):
        for o in range(vocab.num_objects):
            o_part = max(o_sim[o, op] for op in objects_of_state.get(s, [])) if s in objects_of_state else -np.inf
            s_part = max(s_sim[s, sp] for sp in states_of_object.get(o, [])) if o in states_of_object else -np.inf
            scores[s, o] = 0.5 * (o_part + s_part)
    return scores


def feasible_compositions(vocab: Vocabulary, split: CompositionSplit,
                          primitive_similarity: SimilarityTable | SimilarityFn,
                          threshold: float) -> set[Pair]:
    """Pairs whose feasibility score passes the threshold; seen pairs always kept."""
    scores = feasibility_scores(vocab, split, primitive_similarity)
    keep = {(s, o) for s in range(vocab.num_states) for o in range(vocab.num_objects)
            if scores[s, o] >= threshold}
    return keep | set(split.seen)
