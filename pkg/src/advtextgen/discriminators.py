"""Per-class discriminators: MLPs over flattened soft-embedded sequences.

Real texts go through the same one-hot soft-embedding pipeline as generated
ones, so the discriminators cannot separate the two by representation
artifacts alone.
"""

from __future__ import annotations

import torch
from torch import nn

from .checkpoints import arrays_to_state_dict, check_vocab_hash, load_arrays, save_arrays, state_dict_to_arrays
from .corpus import Vocabulary


class ClassDiscriminators(nn.Module):
    """One sigmoid-output MLP per class over a flattened (fixed_len, d_w) input."""

    def __init__(self, num_classes, fixed_len, d_w, hidden=(256, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.fixed_len = fixed_len
        self.d_w = d_w
        self.hidden = tuple(hidden)
        self.mlps = nn.ModuleList(self._build_mlp() for _ in range(num_classes))

    def _build_mlp(self) -> nn.Sequential:
        layers: list[nn.Module] = []
        width = self.fixed_len * self.d_w
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.LeakyReLU(0.2)]
            width = h
        layers.append(nn.Linear(width, 1))
        return nn.Sequential(*layers)

    def logits(self, W: torch.Tensor, class_id: int) -> torch.Tensor:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"class id {class_id} out of range for |Y|={self.num_classes}")
        if W.dim() == 2:
            W = W.unsqueeze(0)
        if W.shape[1] != self.fixed_len or W.shape[2] != self.d_w:
            raise ValueError(f"expected (B, {self.fixed_len}, {self.d_w}) input, got {tuple(W.shape)}")
        return self.mlps[class_id](W.reshape(W.shape[0], -1)).squeeze(-1)


def disc_prob(W: torch.Tensor, class_id: int, model: ClassDiscriminators) -> torch.Tensor:
    """Probability in (0,1) that W is real data of the given class; differentiable in W."""
    probs = torch.sigmoid(model.logits(W, class_id))
    return probs[0] if W.dim() == 2 else probs


def disc_loss_k(real_W: torch.Tensor, fake_W: torch.Tensor, class_id: int,
                model: ClassDiscriminators, eps: float = 1e-12) -> torch.Tensor:
    """Batch estimate of mean log D_k(real) + mean log(1 - D_k(fake))."""
    if real_W.dim() == 2:
        real_W = real_W.unsqueeze(0)
    if fake_W.dim() == 2:
        fake_W = fake_W.unsqueeze(0)
    if real_W.shape[0] == 0 or fake_W.shape[0] == 0:
        raise ValueError("discriminator batches must be non-empty")
    d_real = torch.sigmoid(model.logits(real_W, class_id))
    d_fake = torch.sigmoid(model.logits(fake_W, class_id))
    return torch.log(d_real + eps).mean() + torch.log1p(-(d_fake - eps)).mean()


def generator_fool_loss(fake_W: torch.Tensor, class_id: int, model: ClassDiscriminators,
                        eps: float = 1e-12) -> torch.Tensor:
    """Non-saturating alternative for the generator: -mean log D_k(fake)."""
    d_fake = torch.sigmoid(model.logits(fake_W, class_id))
    return -torch.log(d_fake + eps).mean()


def save_discriminators(model: ClassDiscriminators, path, vocab: Vocabulary) -> None:
    metadata = {
        "kind": "discriminators",
        "vocab_hash": vocab.content_hash(),
        "num_classes": model.num_classes,
        "fixed_len": model.fixed_len,
        "d_w": model.d_w,
        "hidden": list(model.hidden),
    }
    save_arrays(path, state_dict_to_arrays(model.state_dict()), metadata)


def load_discriminators(path, vocab: Vocabulary) -> ClassDiscriminators:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "discriminators":
        raise ValueError(f"{path}: not a discriminator checkpoint")
    check_vocab_hash(meta, vocab, path)
    model = ClassDiscriminators(meta["num_classes"], meta["fixed_len"], meta["d_w"], tuple(meta["hidden"]))
    model.load_state_dict(arrays_to_state_dict(arrays))
    model.eval()
    return model
