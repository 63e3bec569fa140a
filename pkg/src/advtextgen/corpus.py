"""Corpus handling: tokenization, vocabulary, dataset splits, synthetic sentiment data.

The synthetic corpus is a desk-scale stand-in for movie-review datasets: short
templated sentences whose class is decidable from their sentiment words alone,
so that a small classifier can be trained to high accuracy in seconds.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, GO, EOS = "<pad>", "<unk>", "<go>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, GO, EOS)

_TOKEN_RE = re.compile(r"\w+(?:'\w+)?|[^\w\s]")


def tokenize(raw: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, split on whitespace."""
    return _TOKEN_RE.findall(raw.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token <-> id map with PAD/UNK/GO/EOS reserved at ids 0..3."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int]

    pad_id: int = 0
    unk_id: int = 1
    go_id: int = 2
    eos_id: int = 3

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (self.pad_id, self.unk_id, self.go_id, self.eos_id)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: first four tokens must be {SPECIAL_TOKENS}")
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate surface tokens in vocabulary")
        return cls(tuple(tokens), {t: i for i, t in enumerate(tokens)})


@dataclass(frozen=True)
class LabeledText:
    """A text with its class label; ids are filled in by encode_dataset."""

    raw: str
    label: int
    ids: tuple[int, ...] = ()


@dataclass
class DatasetSplits:
    train: list[LabeledText]
    dev: list[LabeledText]
    test: list[LabeledText]
    by_class: dict[int, list[LabeledText]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_class:
            index: dict[int, list[LabeledText]] = defaultdict(list)
            for item in self.train:
                index[item.label].append(item)
            self.by_class = dict(index)

    @property
    def num_classes(self) -> int:
        labels = {t.label for t in self.train + self.dev + self.test}
        return max(labels) + 1


def build_vocabulary(texts: list[LabeledText], max_size: int = 5000, min_freq: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary; ties broken by first appearance in the corpus."""
    if max_size < 5:
        raise ValueError(f"max_size={max_size} leaves no room for specials plus one word")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    position = 0
    for text in texts:
        for token in tokenize(text.raw):
            counts[token] += 1
            if token not in first_seen:
                first_seen[token] = position
            position += 1
    kept = [t for t in counts if counts[t] >= min_freq]
    kept.sort(key=lambda t: (-counts[t], first_seen[t]))
    tokens = list(SPECIAL_TOKENS) + kept[: max_size - len(SPECIAL_TOKENS)]
    return Vocabulary.from_tokens(tokens)


def encode_text(raw: str, vocab: Vocabulary, max_len: int) -> tuple[int, ...]:
    """Token ids for a raw string; OOV words map to UNK, truncated to max_len."""
    words = tokenize(raw)
    if not words:
        raise ValueError(f"text {raw!r} is empty after tokenization")
    return tuple(vocab.token_to_id.get(w, vocab.unk_id) for w in words[:max_len])


def decode_tokens(ids, vocab: Vocabulary) -> str:
    """Space-joined surface tokens with the special tokens dropped."""
    specials = set(vocab.special_ids)
    words = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range for |V|={len(vocab)}")
        if i not in specials:
            words.append(vocab.tokens[i])
    return " ".join(words)


def encode_dataset(texts: list[LabeledText], vocab: Vocabulary, max_len: int) -> list[LabeledText]:
    return [LabeledText(t.raw, t.label, encode_text(t.raw, vocab, max_len)) for t in texts]


def load_dataset(path: str | Path, fmt: str = "jsonl") -> list[LabeledText]:
    """Read a labeled text file. jsonl: {"text":..,"label":..} per line; tsv: label TAB text."""
    if fmt not in ("jsonl", "tsv"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if fmt == "jsonl":
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
                if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                    raise ValueError(f"{path}:{lineno}: line must carry 'text' and 'label'")
                raw, label = obj["text"], obj["label"]
            else:
                parts = line.split("\t", 1)
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
                try:
                    label = int(parts[0])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: label {parts[0]!r} is not an integer") from exc
                raw = parts[1]
            if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            if not isinstance(raw, str):
                raise ValueError(f"{path}:{lineno}: text must be a string")
            texts.append(LabeledText(raw, label))
    return texts


def save_dataset(texts: list[LabeledText], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in texts:
            fh.write(json.dumps({"text": t.raw, "label": t.label}) + "\n")


def split_dataset(
    texts: list[LabeledText],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplits:
    """Seeded shuffle then partition into train/dev/test."""
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"split ratios {ratios} do not sum to 1")
    order = list(range(len(texts)))
    random.Random(seed).shuffle(order)
    shuffled = [texts[i] for i in order]
    n_train = int(len(texts) * ratios[0])
    n_dev = int(len(texts) * ratios[1])
    train, dev, test = shuffled[:n_train], shuffled[n_train : n_train + n_dev], shuffled[n_train + n_dev :]
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        if not part:
            raise ValueError(f"{name} split is empty under ratios {ratios} with {len(texts)} texts")
    return DatasetSplits(train, dev, test)


# --- synthetic sentiment corpus -------------------------------------------

POSITIVE_WORDS = (
    "good great wonderful excellent amazing superb charming delightful "
    "brilliant enjoyable touching inspired"
).split()
NEGATIVE_WORDS = (
    "bad terrible awful boring dreadful horrible tedious bland "
    "clumsy lifeless shallow forgettable"
).split()
_ADVERBS = "truly really quite rather simply utterly".split()
_VERBS = "was felt seemed looked remained appeared".split()
_FUNCTION = "the this a and with , overall".split()
_NOUN_POOL = (
    "movie film story plot acting script cast director scenes dialogue ending "
    "music pacing characters performances visuals editing soundtrack premise tone "
    "humor romance drama finale narration casting lighting effects themes climax "
    "subplot montage costumes cinematography screenplay sequences twists atmosphere "
    "style rhythm"
).split()

# Slots: N noun, V verb, A adverb, S sentiment word (always the label's lexicon).
_TEMPLATES = (
    "the N V S",
    "the N V A S",
    "this N V S and S",
    "the N V S and the N V S",
    "a S N with S N",
    "overall the N V S and S",
    "the N V S , the N V S and the N V A S",
    "a A S N with a S N",
)


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 120
    num_texts: int = 2000
    max_len: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 50:
            raise ValueError("vocab_size must be at least 50")
        if self.max_len < 4:
            raise ValueError("max_len must be at least 4")


def _noun_inventory(spec: SyntheticSpec) -> list[str]:
    base = 4 + len(POSITIVE_WORDS) + len(NEGATIVE_WORDS) + len(_ADVERBS) + len(_VERBS) + len(_FUNCTION)
    wanted = max(2, spec.vocab_size - base)
    nouns = list(_NOUN_POOL[:wanted])
    for i in range(len(nouns), wanted):
        nouns.append(f"aspect{i}")
    return nouns


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[LabeledText]:
    """Balanced templated sentiment corpus, byte-reproducible per seed.

    Labels alternate 0/1 by position; sentiment slots are filled only from the
    label's lexicon with a mild Zipf weighting, so the class of each text is
    decidable from its sentiment words alone.
    """
    rng = random.Random(spec.seed)
    nouns = _noun_inventory(spec)
    templates = [t for t in _TEMPLATES if len(t.split()) <= spec.max_len]
    zipf = [1.0 / (r + 1) for r in range(len(POSITIVE_WORDS))]
    texts = []
    for i in range(spec.num_texts):
        label = i % 2
        lexicon = POSITIVE_WORDS if label == 1 else NEGATIVE_WORDS
        words = []
        for slot in rng.choice(templates).split():
            if slot == "N":
                words.append(rng.choice(nouns))
            elif slot == "V":
                words.append(rng.choice(_VERBS))
            elif slot == "A":
                words.append(rng.choice(_ADVERBS))
            elif slot == "S":
                words.append(rng.choices(lexicon, weights=zipf, k=1)[0])
            else:
                words.append(slot)
        texts.append(LabeledText(" ".join(words), label))
    return texts
