"""Metrics and harnesses: attack success rate, language-model fluency score,
4-gram diversity, oracle-based validity, annotation export, adversarial-training
defense, and the generation-speed benchmark.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import attacks as A
from .checkpoints import arrays_to_state_dict, check_vocab_hash, load_arrays, save_arrays, state_dict_to_arrays
from .config import ExperimentConfig, derive_seed
from .corpus import DatasetSplits, LabeledText, Vocabulary, encode_dataset, tokenize
from .target_model import TextCNN, TrainingDivergedError, accuracy, make_optimizer, train_target
from .trainer import EpochBatchSampler, make_decoder_batch


def attack_success_rate(records) -> float:
    if not records:
        raise ValueError("cannot compute a success rate over zero records")
    return sum(1 for r in records if r.success) / len(records)


# --- language model and fluency score --------------------------------------

class GruLanguageModel(nn.Module):
    """GRU next-token model. The output projection starts at zero so an
    untrained model is exactly the uniform distribution over the vocabulary."""

    def __init__(self, vocab_size, d_emb=64, hidden=96, pad_id=0, go_id=2, eos_id=3):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_emb = d_emb
        self.hidden = hidden
        self.pad_id, self.go_id, self.eos_id = pad_id, go_id, eos_id
        self.embedding = nn.Embedding(vocab_size, d_emb)
        self.gru = nn.GRU(d_emb, hidden, batch_first=True)
        self.out = nn.Linear(hidden, vocab_size)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def logits(self, inputs: torch.Tensor) -> torch.Tensor:
        out, _ = self.gru(self.embedding(inputs))
        return self.out(out)


def train_language_model(texts, vocab: Vocabulary, cfg: ExperimentConfig,
                         seed: int | None = None) -> GruLanguageModel:
    """Fit the next-token model on encoded texts (GO-prefixed, EOS-suffixed)."""
    tc = cfg.training
    seed = tc.seed if seed is None else seed
    torch.manual_seed(derive_seed(seed, "lm-init"))
    lm = GruLanguageModel(len(vocab), cfg.lm_emb, cfg.lm_hidden,
                          vocab.pad_id, vocab.go_id, vocab.eos_id)
    sequences = [t.ids for t in texts if t.ids]
    opt = make_optimizer(lm, tc.lr_gen)
    sampler = EpochBatchSampler(len(sequences), tc.batch_size, derive_seed(seed, "lm-batches"))
    for step in range(cfg.lm_steps):
        batch = [sequences[i] for i in sampler.next_batch()]
        inputs, targets = make_decoder_batch(batch, vocab.go_id, vocab.eos_id, vocab.pad_id)
        logits = lm.logits(inputs)
        mask = targets != vocab.pad_id
        loss = F.cross_entropy(logits[mask], targets[mask])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"language model diverged (NaN loss) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    lm.eval()
    return lm


def corpus_log_likelihood(sequences, lm: GruLanguageModel) -> tuple[float, int]:
    """(total log-probability, word count) of each token given its prefix."""
    total, words = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(sequences), 256):
            chunk = [s for s in sequences[lo : lo + 256] if len(s) > 0]
            if not chunk:
                continue
            width = max(len(s) for s in chunk)
            inputs = torch.full((len(chunk), width), lm.pad_id, dtype=torch.long)
            targets = torch.full((len(chunk), width), lm.pad_id, dtype=torch.long)
            mask = torch.zeros((len(chunk), width), dtype=torch.bool)
            for row, seq in enumerate(chunk):
                inputs[row, 0] = lm.go_id
                if len(seq) > 1:
                    inputs[row, 1 : len(seq)] = torch.tensor(seq[:-1], dtype=torch.long)
                targets[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
                mask[row, : len(seq)] = True
            log_probs = F.log_softmax(lm.logits(inputs), dim=-1)
            picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
            total += float(picked[mask].sum())
            words += int(mask.sum())
    return total, words


def perplexity_score(sequences, lm: GruLanguageModel) -> float:
    """Corpus mean per-word negative log-likelihood (lower is more fluent)."""
    if not sequences:
        raise ValueError("cannot score an empty corpus")
    total, words = corpus_log_likelihood(sequences, lm)
    if words == 0:
        raise ValueError("corpus contains no scorable words")
    return -total / words


def save_language_model(lm: GruLanguageModel, path, vocab: Vocabulary) -> None:
    metadata = {"kind": "language_model", "vocab_hash": vocab.content_hash(),
                "vocab_size": lm.vocab_size, "d_emb": lm.d_emb, "hidden": lm.hidden}
    save_arrays(path, state_dict_to_arrays(lm.state_dict()), metadata)


def load_language_model(path, vocab: Vocabulary) -> GruLanguageModel:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "language_model":
        raise ValueError(f"{path}: not a language-model checkpoint")
    check_vocab_hash(meta, vocab, path)
    lm = GruLanguageModel(meta["vocab_size"], meta["d_emb"], meta["hidden"],
                          vocab.pad_id, vocab.go_id, vocab.eos_id)
    lm.load_state_dict(arrays_to_state_dict(arrays))
    lm.eval()
    return lm


# --- diversity --------------------------------------------------------------

@dataclass
class DiversityReport:
    train_overlap_mean: float
    unique_fraction: float
    n_scored: int
    n_short_excluded: int


def _four_grams(tokens) -> set[tuple]:
    return {tuple(tokens[i : i + 4]) for i in range(len(tokens) - 3)}


def diversity_report(generated_token_lists, train_token_lists, threshold: float = 0.2) -> DiversityReport:
    """Train-overlap and pairwise 4-gram uniqueness.

    A text is unique when more than `threshold` of its 4-grams appear in no
    other single generated text. Texts shorter than 4 tokens carry no 4-grams
    and are excluded (counted in the report).
    """
    if not generated_token_lists:
        raise ValueError("cannot evaluate diversity of an empty set")
    train_grams = set()
    for tokens in train_token_lists:
        train_grams |= _four_grams(tokens)
    gram_sets = [_four_grams(t) for t in generated_token_lists]
    scored = [g for g in gram_sets if g]
    n_short = len(gram_sets) - len(scored)
    if not scored:
        raise ValueError("no generated text is long enough for 4-gram statistics")

    overlaps = [len(g & train_grams) / len(g) for g in scored]

    containing: dict[tuple, int] = {}
    for g in scored:
        for gram in g:
            containing[gram] = containing.get(gram, 0) + 1
    unique = 0
    for g in scored:
        nowhere_else = sum(1 for gram in g if containing[gram] == 1)
        if nowhere_else / len(g) > threshold:
            unique += 1
    return DiversityReport(
        train_overlap_mean=sum(overlaps) / len(overlaps),
        unique_fraction=unique / len(scored),
        n_scored=len(scored),
        n_short_excluded=n_short,
    )


# --- validity oracle ---------------------------------------------------------

class BowOracle:
    """Bag-of-words softmax regression standing in for human class judgment."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, dev_accuracy: float):
        self.weights = weights
        self.bias = bias
        self.dev_accuracy = dev_accuracy

    def _features(self, ids) -> np.ndarray:
        x = np.zeros(self.weights.shape[0])
        for i in ids:
            x[i] += 1.0
        return x

    def predict(self, ids) -> int:
        return int(np.argmax(self._features(ids) @ self.weights + self.bias))

    def accuracy(self, texts) -> float:
        hits = sum(1 for t in texts if self.predict(t.ids) == t.label)
        return hits / len(texts)


def train_oracle(train_texts, eval_texts, vocab_size: int, num_classes: int,
                 epochs: int = 300, lr: float = 0.5) -> BowOracle:
    """Fit the oracle on one partition and measure accuracy on another."""
    X = np.zeros((len(train_texts), vocab_size))
    for row, t in enumerate(train_texts):
        for i in t.ids:
            X[row, i] += 1.0
    y = np.array([t.label for t in train_texts])
    W = np.zeros((vocab_size, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot) / len(train_texts)
        W -= lr * (X.T @ grad)
        b -= lr * grad.sum(axis=0)
    oracle = BowOracle(W, b, dev_accuracy=0.0)
    oracle.dev_accuracy = oracle.accuracy(eval_texts)
    return oracle


def validity_proxy_rate(records, oracle: BowOracle) -> float:
    """Fraction of records the oracle assigns the condition class while the
    target predicted the attack class."""
    if oracle.dev_accuracy < 0.9:
        raise ValueError(f"oracle dev accuracy {oracle.dev_accuracy:.3f} is below 0.9; "
                         "validity would not be trustworthy")
    if not records:
        raise ValueError("cannot compute validity over zero records")
    valid = 0
    for rec in records:
        if rec.target_class is None:
            raise ValueError("validity is defined for targeted records only")
        if rec.predicted_class == rec.target_class and oracle.predict(rec.generated_ids) == rec.condition_class:
            valid += 1
    return valid / len(records)


# --- human annotation export -------------------------------------------------

def export_annotation_batch(records, path, n: int = 100, seed: int = 0) -> list[int]:
    """Sample n records without replacement into a CSV with a blank human_label column."""
    if len(records) < n:
        raise ValueError(f"need at least {n} records, got {len(records)}")
    picked = sorted(random.Random(seed).sample(range(len(records)), n))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "text", "condition_class", "human_label"])
        for i in picked:
            writer.writerow([i, records[i].generated_text, records[i].condition_class, ""])
    return picked


def import_annotation_batch(path, records) -> float:
    """Human validity once the CSV is filled: the annotator assigned the
    condition class and the attack itself succeeded."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no annotation rows")
    valid = 0
    for row in rows:
        if row["human_label"] == "":
            raise ValueError(f"{path}: record {row['id']} is not annotated yet")
        rec = records[int(row["id"])]
        if int(row["human_label"]) == rec.condition_class and rec.success:
            valid += 1
    return valid / len(rows)


# --- adversarial-training defense ---------------------------------------------

@dataclass
class DefenseReport:
    clean_accuracy_before: float
    adversarial_accuracy_before: float
    clean_accuracy_after: float
    adversarial_accuracy_after: float
    n_adversarial_train: int
    n_adversarial_test: int


def records_as_texts(records) -> list[LabeledText]:
    """Adversarial records as labeled data: the condition class is ground truth."""
    return [LabeledText(r.generated_text, r.condition_class) for r in records]


def retrain_with_augmentation(splits: DatasetSplits, extra: list[LabeledText],
                              vocab: Vocabulary, cfg: ExperimentConfig, seed: int):
    augmented = DatasetSplits(splits.train + list(extra), splits.dev, splits.test)
    model, dev_acc = train_target(augmented, vocab, cfg, seed=seed)
    return model, dev_acc


def augment_and_retrain(splits: DatasetSplits, records, target: TextCNN, vocab: Vocabulary,
                        cfg: ExperimentConfig, holdout_fraction: float = 0.2,
                        seed: int = 0) -> DefenseReport:
    """Retrain the target architecture from scratch on clean data plus a train
    share of the adversarial records; report accuracies on the clean test split
    and the held-out adversarial share, before and after."""
    if not records:
        raise ValueError("adversarial record set is empty")
    order = list(range(len(records)))
    random.Random(derive_seed(seed, "defense-holdout")).shuffle(order)
    n_test = max(1, int(len(records) * holdout_fraction))
    adv_test = records_as_texts([records[i] for i in order[:n_test]])
    adv_train = records_as_texts([records[i] for i in order[n_test:]])

    test_enc = encode_dataset(splits.test, vocab, cfg.max_len)
    adv_test_enc = encode_dataset(adv_test, vocab, cfg.max_len)

    clean_before = accuracy(target, test_enc)
    adv_before = accuracy(target, adv_test_enc)
    retrained, _ = retrain_with_augmentation(splits, adv_train, vocab, cfg,
                                             seed=derive_seed(seed, "defense-retrain"))
    clean_after = accuracy(retrained, test_enc)
    adv_after = accuracy(retrained, adv_test_enc)
    return DefenseReport(clean_before, adv_before, clean_after, adv_after,
                         len(adv_train), len(adv_test))


# --- speed benchmark -----------------------------------------------------------

def timing_benchmark(mode: str, count: int, texts, gen, target, vocab: Vocabulary,
                     target_class_map, cfg: ExperimentConfig, seed: int = 0) -> float:
    """Wall-clock seconds per generated example.

    Generator modes run batched feed-forward; the gradient baselines run a
    per-example loop, matching how each would be deployed.
    """
    bl_cfg = A.BaselineConfig(epsilon=cfg.epsilon_fgsm, modify_fraction=cfg.modify_fraction,
                              max_deepfool_iters=cfg.max_deepfool_iters, seed=seed)
    pool = None
    if mode != "unrestricted":
        if not texts:
            raise ValueError(f"mode {mode!r} needs source texts")
        pool = [texts[i % len(texts)] for i in range(count)]
    start = time.perf_counter()
    if mode == "unrestricted":
        A.generate_unrestricted(count, 0, gen, target, vocab, target_class_map,
                                cfg.beam_width, cfg.max_len, seed=seed)
    elif mode == "pairwise":
        A.attack_pairwise_batch(pool, gen, target, vocab, target_class_map,
                                cfg.beam_width, cfg.max_len, seed=seed)
    elif mode in ("random", "fgsm_nns", "deepfool_nns"):
        A.run_baseline(mode, pool, bl_cfg, target, vocab)
    else:
        raise ValueError(f"unknown benchmark mode {mode!r}")
    elapsed = time.perf_counter() - start
    return elapsed / count


# --- aggregate report ----------------------------------------------------------

@dataclass
class MetricsReport:
    attack_success_rate: float
    perplexity_score: float
    perplexity_exp: float
    validity_rate: float | None
    train_overlap_mean: float
    unique_fraction: float
    seconds_per_example: float | None
    n_records: int

    def to_dict(self) -> dict:
        return {
            "attack_success_rate": self.attack_success_rate,
            "perplexity_score": self.perplexity_score,
            "perplexity_exp": self.perplexity_exp,
            "validity_rate": self.validity_rate,
            "diversity": {
                "train_overlap_mean": self.train_overlap_mean,
                "unique_fraction": self.unique_fraction,
            },
            "seconds_per_example": self.seconds_per_example,
            "n_records": self.n_records,
        }

    def table(self) -> str:
        rows = [
            ("records", f"{self.n_records}"),
            ("attack success rate", f"{self.attack_success_rate:.4f}"),
            ("perplexity (mean NLL)", f"{self.perplexity_score:.4f}"),
            ("perplexity (exp)", f"{self.perplexity_exp:.4f}"),
            ("validity (oracle)", "n/a" if self.validity_rate is None else f"{self.validity_rate:.4f}"),
            ("4-gram train overlap", f"{self.train_overlap_mean:.4f}"),
            ("unique fraction", f"{self.unique_fraction:.4f}"),
            ("seconds/example", "n/a" if self.seconds_per_example is None else f"{self.seconds_per_example:.5f}"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def build_metrics_report(records, lm, oracle, train_token_lists) -> MetricsReport:
    """Standard metric suite over one batch of generated records."""
    asr = attack_success_rate(records)
    ppl = perplexity_score([r.generated_ids for r in records if r.generated_ids], lm)
    validity = validity_proxy_rate(records, oracle) if oracle is not None else None
    diversity = diversity_report([tokenize(r.generated_text) for r in records], train_token_lists)
    return MetricsReport(
        attack_success_rate=asr,
        perplexity_score=ppl,
        perplexity_exp=math.exp(ppl),
        validity_rate=validity,
        train_overlap_mean=diversity.train_overlap_mean,
        unique_fraction=diversity.unique_fraction,
        seconds_per_example=None,
        n_records=len(records),
    )
