"""The attacked classifier: a small convolutional text model over fixed-length input.

Exposes a hard path (token ids) and a soft path (an embedded matrix built from
per-position vocabulary distributions); both share the network from the
embedding layer onward, so one-hot soft inputs reproduce hard predictions.
"""

from __future__ import annotations

import random

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import arrays_to_state_dict, check_vocab_hash, load_arrays, save_arrays, state_dict_to_arrays
from .config import ExperimentConfig
from .corpus import DatasetSplits, Vocabulary, encode_dataset


class FrozenModelError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class TextCNN(nn.Module):
    """Convolutional text classifier with max-over-time pooling.

    Args:
        vocab_size: size of the vocabulary (embedding rows).
        num_classes: output classes.
        fixed_len: fixed input length m; shorter inputs are PAD-padded.
        d_w: word embedding width.
        filter_widths: convolution window sizes.
        n_filters: filters per window size.
        pad_id: id used to pad hard inputs (one-hot PAD rows on the soft path).
    """

    def __init__(self, vocab_size, num_classes, fixed_len, d_w=64,
                 filter_widths=(3, 4, 5), n_filters=32, pad_id=0):
        super().__init__()
        if fixed_len < max(filter_widths):
            raise ValueError("fixed_len must cover the widest convolution filter")
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.fixed_len = fixed_len
        self.d_w = d_w
        self.filter_widths = tuple(filter_widths)
        self.n_filters = n_filters
        self.pad_id = pad_id
        self.frozen = False
        self.embedding = nn.Embedding(vocab_size, d_w)
        self.convs = nn.ModuleList(nn.Conv1d(d_w, n_filters, w) for w in filter_widths)
        self.fc = nn.Linear(n_filters * len(filter_widths), num_classes)

    def pad_ids(self, ids) -> torch.Tensor:
        """Right-pad (or truncate) one sequence to fixed_len."""
        ids = list(ids)[: self.fixed_len]
        ids = ids + [self.pad_id] * (self.fixed_len - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def batch_ids(self, sequences) -> torch.Tensor:
        return torch.stack([self.pad_ids(s) for s in sequences])

    def forward_embedded(self, x: torch.Tensor) -> torch.Tensor:
        """Logits from an embedded batch of shape (B, fixed_len, d_w)."""
        if x.dim() != 3 or x.shape[1] != self.fixed_len or x.shape[2] != self.d_w:
            raise ValueError(f"expected (B, {self.fixed_len}, {self.d_w}) input, got {tuple(x.shape)}")
        h = x.transpose(1, 2)
        pooled = [F.relu(conv(h)).max(dim=2).values for conv in self.convs]
        return self.fc(torch.cat(pooled, dim=1))

    def forward_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.forward_embedded(self.embedding(ids))


def freeze(model: TextCNN) -> TextCNN:
    """Mark params immutable; optimizer registration on them then fails."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.frozen = True
    model.eval()
    return model


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    if getattr(model, "frozen", False):
        raise FrozenModelError("cannot register an optimizer over frozen parameters")
    return torch.optim.Adam(model.parameters(), lr=lr)


def predict_hard(ids, model: TextCNN) -> torch.Tensor:
    """Softmax class probabilities for one token sequence."""
    if len(ids) == 0:
        raise ValueError("cannot predict on an empty sequence")
    with torch.no_grad():
        logits = model.forward_ids(model.batch_ids([ids]))
    return torch.softmax(logits[0], dim=0)


def predict_hard_batch(sequences, model: TextCNN) -> torch.Tensor:
    if any(len(s) == 0 for s in sequences):
        raise ValueError("cannot predict on an empty sequence")
    with torch.no_grad():
        logits = model.forward_ids(model.batch_ids(sequences))
    return torch.softmax(logits, dim=1)


def predict_soft(W: torch.Tensor, model: TextCNN) -> torch.Tensor:
    """Softmax probabilities from an embedded matrix; differentiable w.r.t. W."""
    squeeze = W.dim() == 2
    if squeeze:
        W = W.unsqueeze(0)
    logits = model.forward_embedded(W)
    probs = torch.softmax(logits, dim=1)
    return probs[0] if squeeze else probs


def input_gradients(ids, loss_class: int, model: TextCNN, scale: float = 1.0) -> torch.Tensor:
    """Gradient of the cross-entropy loss at loss_class w.r.t. each position's embedding row."""
    if len(ids) == 0:
        raise ValueError("cannot take gradients of an empty sequence")
    padded = model.batch_ids([ids])
    x = model.embedding(padded).detach().requires_grad_(True)
    logits = model.forward_embedded(x)
    loss = scale * F.cross_entropy(logits, torch.tensor([loss_class]))
    loss.backward()
    return x.grad[0, : min(len(ids), model.fixed_len)].detach().clone()


def accuracy(model: TextCNN, texts) -> float:
    probs = predict_hard_batch([t.ids for t in texts], model)
    predicted = probs.argmax(dim=1)
    labels = torch.tensor([t.label for t in texts])
    return (predicted == labels).float().mean().item()


def train_target(splits: DatasetSplits, vocab: Vocabulary, cfg: ExperimentConfig,
                 seed: int | None = None) -> tuple[TextCNN, float]:
    """Train the classifier on the train split; returns (unfrozen model, dev accuracy)."""
    if not splits.train or not splits.dev:
        raise ValueError("train and dev splits must be non-empty")
    tc = cfg.training
    seed = tc.seed if seed is None else seed
    torch.manual_seed(seed)
    model = TextCNN(len(vocab), cfg.num_classes, cfg.fixed_len, cfg.d_w,
                    cfg.filter_widths, cfg.n_filters, vocab.pad_id)
    train = encode_dataset(splits.train, vocab, cfg.max_len)
    dev = encode_dataset(splits.dev, vocab, cfg.max_len)
    opt = make_optimizer(model, tc.lr_target)
    rng = random.Random(seed)
    step = 0
    for _ in range(tc.target_epochs):
        order = list(range(len(train)))
        rng.shuffle(order)
        for lo in range(0, len(order), tc.batch_size):
            batch = [train[i] for i in order[lo : lo + tc.batch_size]]
            ids = model.batch_ids([t.ids for t in batch])
            labels = torch.tensor([t.label for t in batch])
            loss = F.cross_entropy(model.forward_ids(ids), labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"target training diverged (NaN loss) at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    model.eval()
    return model, accuracy(model, dev)


def save_target(model: TextCNN, path, vocab: Vocabulary) -> None:
    metadata = {
        "kind": "target",
        "vocab_hash": vocab.content_hash(),
        "vocab_size": model.vocab_size,
        "num_classes": model.num_classes,
        "fixed_len": model.fixed_len,
        "d_w": model.d_w,
        "filter_widths": list(model.filter_widths),
        "n_filters": model.n_filters,
        "pad_id": model.pad_id,
        "frozen": model.frozen,
    }
    save_arrays(path, state_dict_to_arrays(model.state_dict()), metadata)


def load_target(path, vocab: Vocabulary) -> TextCNN:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "target":
        raise ValueError(f"{path}: not a target-model checkpoint")
    check_vocab_hash(meta, vocab, path)
    model = TextCNN(meta["vocab_size"], meta["num_classes"], meta["fixed_len"], meta["d_w"],
                    tuple(meta["filter_widths"]), meta["n_filters"], meta["pad_id"])
    model.load_state_dict(arrays_to_state_dict(arrays))
    if meta["frozen"]:
        freeze(model)
    model.eval()
    return model
