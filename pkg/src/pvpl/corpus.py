"""Text-only training data: balanced synthetic captions from a template
grammar, lexicon-based label extraction, reasonableness filtering, and
label-preserving text noise.

Sentences are produced by instantiating ~20 sentence frames with
subject/scene/time slot fillers around 1-3 sampled class mentions; class
sampling is weighted inversely to running per-class counts so the corpus
stays balanced. Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class CategorySet:
    """Ordered class names plus per-class synonym surface forms.

    The ordering is fixed and defines the class index used everywhere
    downstream (labels, prompt banks, score vectors, reports).
    """

    names: tuple[str, ...]
    synonyms: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("category set must not be empty")
        if len(self.names) != len(set(self.names)):
            raise ValueError("category names must be unique")
        if any(not n.strip() for n in self.names):
            raise ValueError("category names must be nonempty")
        if len(self.synonyms) != len(self.names):
            raise ValueError("need one synonym tuple per category")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def surface_forms(self, i: int) -> tuple[str, ...]:
        return (self.names[i],) + self.synonyms[i]

    def surface_tokens(self) -> set[str]:
        """All word tokens appearing in any name or synonym."""
        out: set[str] = set()
        for i in range(len(self.names)):
            for form in self.surface_forms(i):
                out.update(split_words(form))
        return out

    def to_file(self, path) -> None:
        doc = {
            "classes": [
                {"name": n, "synonyms": list(s)}
                for n, s in zip(self.names, self.synonyms)
            ]
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path) -> "CategorySet":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        names = tuple(c["name"] for c in doc["classes"])
        synonyms = tuple(tuple(c.get("synonyms", ())) for c in doc["classes"])
        return cls(names=names, synonyms=synonyms)


def default_categories() -> CategorySet:
    return CategorySet(
        names=("car", "dog", "cat", "airplane", "bicycle", "boat", "bird", "horse"),
        synonyms=(
            ("automobile",),
            ("puppy",),
            ("kitten",),
            ("plane",),
            ("bike",),
            ("ship",),
            (),
            ("pony",),
        ),
    )


@dataclass(frozen=True)
class CorpusRecord:
    sentence: str
    positive_labels: frozenset[int]
    source: str = "generated"  # generated | noised | external


@dataclass
class CorpusStats:
    per_class_counts: list[int]
    labels_per_sentence: dict[int, int]
    imbalance_ratio: float

    def to_dict(self) -> dict:
        return {
            "per_class_counts": self.per_class_counts,
            "labels_per_sentence": {str(k): v for k, v in sorted(self.labels_per_sentence.items())},
            "imbalance_ratio": self.imbalance_ratio,
        }


# -- grammar ---------------------------------------------------------------

SCENES = (
    "park", "street", "beach", "kitchen", "garden", "harbor",
    "market", "meadow", "station", "yard", "field", "trail",
)
ADJECTIVES = (
    "small", "large", "bright", "quiet", "shiny", "old",
    "young", "colorful", "sleepy", "busy",
)
VERBS = (
    "resting", "standing", "waiting", "moving", "playing", "sitting", "grazing",
)
TIMES = (
    "morning", "noon", "evening", "sunset", "night", "winter", "summer", "spring",
)

FRAMES = (
    "a photo of {items} in the {scene}",
    "a picture of {items} near the {scene}",
    "{items} {verb} by the {scene}",
    "there is {items} at the {scene}",
    "{items} in a {adj} {scene} during the {time}",
    "a {adj} view of {items} at the {scene}",
    "{items} {verb} in the {scene} this {time}",
    "the {scene} has {items} {verb} there",
    "a {adj} photo showing {items} outdoors",
    "{items} seen near a {adj} {scene}",
    "an image of {items} by the {scene}",
    "{items} beside the {scene} in the {time}",
    "one can see {items} at the {scene}",
    "a snapshot of {items} taken at {time}",
    "{items} {verb} under a {adj} sky",
    "the {adj} {scene} with {items} around",
    "{items} out in the {scene} at {time}",
    "a view of {items} and the {adj} {scene}",
    "{items} gathered near the {adj} {scene}",
    "a view of {items} during the {time}",
)

# words rejected by the reasonableness check when deciding whether a
# sentence carries any content beyond its labels
STOPWORDS = frozenset(
    "a an the and of in at on by with there is are this one can be to "
    "under near during has out".split()
)


def grammar_vocabulary() -> set[str]:
    """Every word the template grammar can emit (slot fillers and frame text)."""
    words: set[str] = set()
    for frame in FRAMES:
        words.update(w for w in split_words(frame) if w not in ("items", "scene", "adj", "verb", "time"))
    for lexicon in (SCENES, ADJECTIVES, VERBS, TIMES):
        words.update(lexicon)
    return words


def _usable_fillers(categories: CategorySet) -> dict[str, tuple[str, ...]]:
    """Slot lexicons with any word colliding with a class surface form removed."""
    taken = categories.surface_tokens()
    out = {}
    for slot, lexicon in (("scene", SCENES), ("adj", ADJECTIVES), ("verb", VERBS), ("time", TIMES)):
        kept = tuple(w for w in lexicon if w not in taken)
        if not kept:
            raise ValueError(f"category names exhaust the '{slot}' filler lexicon")
        out[slot] = kept
    return out


def _usable_frames(categories: CategorySet) -> tuple[str, ...]:
    taken = categories.surface_tokens()
    kept = tuple(
        f for f in FRAMES
        if not any(w in taken for w in split_words(f) if w not in ("items", "scene", "adj", "verb", "time"))
    )
    if not kept:
        raise ValueError("category names collide with every sentence frame")
    return kept


def _mention(categories: CategorySet, class_index: int, rng: np.random.Generator) -> str:
    forms = categories.surface_forms(class_index)
    if len(forms) > 1 and rng.random() < 0.3:
        return str(rng.choice(forms[1:]))
    return forms[0]


def _items_phrase(mentions: list[str]) -> str:
    parts = [("an " if m[0] in "aeiou" else "a ") + m for m in mentions]
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _instantiate(
    categories: CategorySet,
    label_indices: tuple[int, ...],
    rng: np.random.Generator,
    frames: tuple[str, ...],
    fillers: dict[str, tuple[str, ...]],
    max_words: int,
) -> str:
    mentions = [_mention(categories, i, rng) for i in label_indices]
    frame = str(rng.choice(frames))
    slots = {
        "items": _items_phrase(mentions),
        "scene": str(rng.choice(fillers["scene"])),
        "adj": str(rng.choice(fillers["adj"])),
        "verb": str(rng.choice(fillers["verb"])),
        "time": str(rng.choice(fillers["time"])),
    }
    sentence = frame.format(**slots)
    if len(sentence.split()) >= max_words:
        # fall back to the shortest frame; primary names only
        sentence = "a photo of " + _items_phrase([categories.names[i] for i in label_indices])
        if len(sentence.split()) >= max_words:
            raise ValueError(
                f"cannot phrase classes {label_indices} in under {max_words} words"
            )
    return sentence


def generate_corpus(
    categories: CategorySet,
    count: int,
    seed: int,
    max_words: int = 15,
    defect_rate: float = 0.0,
) -> list[CorpusRecord]:
    """Balanced synthetic captions; every sampled class is mentioned.

    1-3 classes per sentence, sampled with probability inversely
    proportional to running class counts, so per-class positives stay
    within a narrow band. Same seed, same records.

    ``defect_rate`` emulates the unreliability of machine-generated
    captions: that fraction of records either omits one mentioned class
    from its label set or mentions one extra unlabeled class. Either way
    the extracted labels remain a superset of the stated ones; the
    reasonableness check exists to weed these records out.
    """
    if count <= 0:
        raise ValueError(f"corpus size must be positive, got {count}")
    if not 0.0 <= defect_rate <= 1.0:
        raise ValueError(f"defect rate must be in [0, 1], got {defect_rate}")
    n = len(categories)
    rng = np.random.default_rng(seed)
    frames = _usable_frames(categories)
    fillers = _usable_fillers(categories)
    counts = np.zeros(n, dtype=np.float64)
    records: list[CorpusRecord] = []
    for _ in range(count):
        k = int(rng.integers(1, min(3, n) + 1))
        weights = 1.0 / (counts + 1.0)
        weights /= weights.sum()
        chosen = tuple(int(i) for i in rng.choice(n, size=k, replace=False, p=weights))
        mentioned, labeled = chosen, chosen
        if rng.random() < defect_rate:
            hide = rng.random() < 0.5
            if hide and k >= 2:
                drop = int(rng.integers(k))
                labeled = chosen[:drop] + chosen[drop + 1:]
            elif k < min(3, n):
                others = [c for c in range(n) if c not in chosen]
                mentioned = chosen + (int(rng.choice(others)),)
        sentence = _instantiate(categories, mentioned, rng, frames, fillers, max_words)
        for i in labeled:
            counts[i] += 1
        records.append(CorpusRecord(sentence, frozenset(labeled), "generated"))
    return records


# -- label extraction and filtering ----------------------------------------


def extract_labels(categories: CategorySet, sentence: str) -> set[int]:
    """Classes whose name or synonym occurs as a token (or consecutive
    token phrase) of the sentence; token boundaries, no substring hits."""
    tokens = split_words(sentence)
    found: set[int] = set()
    for i in range(len(categories)):
        for form in categories.surface_forms(i):
            phrase = split_words(form)
            if not phrase:
                continue
            width = len(phrase)
            for start in range(len(tokens) - width + 1):
                if tokens[start:start + width] == phrase:
                    found.add(i)
                    break
            if i in found:
                break
    return found


def _label_token_set(categories: CategorySet, labels: frozenset[int]) -> set[str]:
    out: set[str] = set()
    for i in labels:
        for form in categories.surface_forms(i):
            out.update(split_words(form))
    return out


def reasonableness_check(
    categories: CategorySet,
    records: list[CorpusRecord],
    max_words: int = 15,
) -> tuple[list[CorpusRecord], list[tuple[CorpusRecord, str]]]:
    """Partition records into (kept, rejected-with-reason).

    A record is rejected when its extracted labels disagree with its
    stated labels, when it is too long, or when it contains nothing but
    label words and stopwords.
    """
    kept: list[CorpusRecord] = []
    rejected: list[tuple[CorpusRecord, str]] = []
    for rec in records:
        if extract_labels(categories, rec.sentence) != set(rec.positive_labels):
            rejected.append((rec, "label-mismatch"))
            continue
        if len(rec.sentence.split()) >= max_words:
            rejected.append((rec, "too-long"))
            continue
        label_tokens = _label_token_set(categories, rec.positive_labels)
        content = [
            t for t in split_words(rec.sentence)
            if t not in label_tokens and t not in STOPWORDS
        ]
        if not content:
            rejected.append((rec, "no-content"))
            continue
        kept.append(rec)
    return kept, rejected


# -- augmentation and noise --------------------------------------------------


def augment_corpus(
    categories: CategorySet,
    records: list[CorpusRecord],
    seed: int,
    factor: int,
) -> list[CorpusRecord]:
    """Add factor-1 re-phrasings per record (same label set), deduplicated
    on exact sentence text."""
    if factor < 1:
        raise ValueError(f"augmentation factor must be >= 1, got {factor}")
    if factor == 1:
        return list(records)
    rng = np.random.default_rng(seed)
    frames = _usable_frames(categories)
    fillers = _usable_fillers(categories)
    seen = {rec.sentence for rec in records}
    out: list[CorpusRecord] = []
    for rec in records:
        out.append(rec)
        for _ in range(factor - 1):
            labels = tuple(sorted(rec.positive_labels))
            sentence = _instantiate(categories, labels, rng, frames, fillers, max_words=15)
            if sentence in seen:
                continue
            seen.add(sentence)
            out.append(CorpusRecord(sentence, rec.positive_labels, rec.source))
    return out


def add_text_noise(
    categories: CategorySet,
    records: list[CorpusRecord],
    seed: int,
    noise_rate: float,
) -> list[CorpusRecord]:
    """Perturb an exact round(noise_rate * len) subset of records.

    One of three perturbations is applied per selected record: drop a
    non-label word, swap two adjacent non-label words, or duplicate a
    non-label word. Label-word tokens are never touched, so the stated
    labels keep their mentions.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise rate must be in [0, 1], got {noise_rate}")
    rng = np.random.default_rng(seed)
    n_noise = int(round(noise_rate * len(records)))
    if n_noise == 0:
        return list(records)
    selected = set(int(i) for i in rng.choice(len(records), size=n_noise, replace=False))
    out: list[CorpusRecord] = []
    for pos, rec in enumerate(records):
        if pos not in selected:
            out.append(rec)
            continue
        words = rec.sentence.split()
        label_tokens = _label_token_set(categories, rec.positive_labels)
        eligible = [
            i for i, w in enumerate(words)
            if not any(t in label_tokens for t in split_words(w))
        ]
        new_words = list(words)
        if eligible:
            op = int(rng.integers(3))
            adjacent = [i for i in eligible[:-1] if i + 1 in set(eligible)]
            if op == 1 and adjacent:
                i = int(rng.choice(adjacent))
                new_words[i], new_words[i + 1] = new_words[i + 1], new_words[i]
            elif op == 0 and len(new_words) > 1:
                del new_words[int(rng.choice(eligible))]
            else:
                i = int(rng.choice(eligible))
                new_words.insert(i + 1, new_words[i])
        out.append(CorpusRecord(" ".join(new_words), rec.positive_labels, "noised"))
    return out


# -- statistics ---------------------------------------------------------------


def corpus_stats(records: list[CorpusRecord], categories: CategorySet) -> CorpusStats:
    counts = [0] * len(categories)
    hist: Counter[int] = Counter()
    for rec in records:
        hist[len(rec.positive_labels)] += 1
        for i in rec.positive_labels:
            counts[i] += 1
    if records and min(counts) > 0:
        ratio = max(counts) / min(counts)
    elif not records:
        ratio = 0.0
    else:
        ratio = float("inf")
    return CorpusStats(counts, dict(hist), ratio)


# -- persistence --------------------------------------------------------------


def save_corpus(path, records: list[CorpusRecord], categories: CategorySet) -> None:
    """One JSON object per line: {"sentence", "labels" (class names), "source"}."""
    lines = []
    for rec in records:
        doc = {
            "sentence": rec.sentence,
            "labels": [categories.names[i] for i in sorted(rec.positive_labels)],
            "source": rec.source,
        }
        lines.append(json.dumps(doc, separators=(",", ":"), sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_corpus(path, categories: CategorySet) -> list[CorpusRecord]:
    records: list[CorpusRecord] = []
    name_to_index = {n: i for i, n in enumerate(categories.names)}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        doc = json.loads(line)
        try:
            labels = frozenset(name_to_index[n] for n in doc["labels"])
        except KeyError as exc:
            raise ValueError(f"{path}:{lineno}: unknown class name {exc}") from None
        records.append(CorpusRecord(doc["sentence"], labels, doc.get("source", "external")))
    return records
