"""Attack modes: pair-wise transformation, unrestricted generation from latent
samples, and the replacement baselines (random, FGSM+NNS, DeepFool+NNS).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass

import torch

from . import generator as G
from .config import derive_seed
from .corpus import LabeledText, Vocabulary, decode_tokens
from .generator import CondVAE
from .target_model import TextCNN, input_gradients, predict_hard, predict_hard_batch


@dataclass
class BaselineConfig:
    epsilon: float = 1.0
    modify_fraction: float = 0.10
    max_deepfool_iters: int = 20
    deepfool_overshoot: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.modify_fraction <= 1.0:
            raise ValueError("modify_fraction must lie in (0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")


@dataclass
class AttackRecord:
    mode: str
    condition_class: int
    target_class: int | None
    generated_text: str
    generated_ids: tuple[int, ...]
    prediction: tuple[float, ...]
    predicted_class: int
    success: bool
    source_text: str | None = None
    latent_seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "source_text": self.source_text,
            "condition_class": self.condition_class,
            "target_class": self.target_class,
            "generated_text": self.generated_text,
            "generated_ids": list(self.generated_ids),
            "prediction": list(self.prediction),
            "predicted_class": self.predicted_class,
            "success": self.success,
            "latent_seed": self.latent_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackRecord":
        return cls(
            mode=d["mode"],
            condition_class=d["condition_class"],
            target_class=d["target_class"],
            generated_text=d["generated_text"],
            generated_ids=tuple(d["generated_ids"]),
            prediction=tuple(d["prediction"]),
            predicted_class=d["predicted_class"],
            success=d["success"],
            source_text=d.get("source_text"),
            latent_seed=d.get("latent_seed"),
        )


def record_is_consistent(rec: AttackRecord) -> bool:
    """The success flag must be recomputable from the record's own fields."""
    if rec.predicted_class != max(range(len(rec.prediction)), key=lambda i: rec.prediction[i]):
        return False
    if rec.mode.startswith("baseline:"):
        return rec.success == (rec.predicted_class != rec.condition_class)
    return rec.success == (rec.predicted_class == rec.target_class)


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def load_records(path) -> list[AttackRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(AttackRecord.from_dict(json.loads(line)))
    return records


def _finish_targeted(mode, ids_batch, labels, targets, probs, vocab, sources, latent_seed):
    records = []
    for i, ids in enumerate(ids_batch):
        p = probs[i]
        predicted = int(p.argmax())
        records.append(AttackRecord(
            mode=mode,
            condition_class=int(labels[i]),
            target_class=int(targets[i]),
            generated_text=decode_tokens(ids, vocab),
            generated_ids=tuple(ids),
            prediction=tuple(float(v) for v in p),
            predicted_class=predicted,
            success=predicted == int(targets[i]),
            source_text=None if sources is None else sources[i],
            latent_seed=latent_seed,
        ))
    return records


def attack_pairwise_batch(texts: list[LabeledText], gen: CondVAE, target: TextCNN,
                          vocab: Vocabulary, target_class_map: dict[int, int],
                          beam_width: int = 4, max_len: int = 20, seed: int = 0) -> list[AttackRecord]:
    """Transform given texts: encode, reparameterize (seeded), decode with the
    text's own class as condition, then score against the frozen target."""
    if not getattr(target, "frozen", False):
        raise ValueError("target model must be frozen before attacking")
    if any(not t.ids for t in texts):
        raise ValueError("pairwise attack needs encoded texts (non-empty ids)")
    with torch.no_grad():
        enc = G.encode_batch([t.ids for t in texts], gen)
        eps_gen = torch.Generator().manual_seed(seed)
        z = G.reparameterize(enc.mu, enc.sigma, G.sample_eps(enc.mu.shape, eps_gen, enc.mu.dtype))
        labels = [t.label for t in texts]
        h0 = G.init_decoder_state(z, torch.tensor(labels), gen)
        ids_batch = G.decode_beam_search_batch(h0, gen, beam_width, max_len)
        probs = predict_hard_batch(ids_batch, target)
    targets_ = [target_class_map[l] for l in labels]
    records = _finish_targeted("pairwise", ids_batch, labels, targets_, probs, vocab,
                               [t.raw for t in texts], seed)
    return records


def attack_pairwise(x: LabeledText, gen: CondVAE, target: TextCNN, vocab: Vocabulary,
                    target_class_map: dict[int, int], beam_width: int = 4,
                    max_len: int = 20, seed: int = 0) -> AttackRecord:
    return attack_pairwise_batch([x], gen, target, vocab, target_class_map,
                                 beam_width, max_len, seed)[0]


def generate_unrestricted(n: int, condition_class: int, gen: CondVAE, target: TextCNN,
                          vocab: Vocabulary, target_class_map: dict[int, int],
                          beam_width: int = 4, max_len: int = 20, seed: int = 0,
                          batch_size: int = 256) -> list[AttackRecord]:
    """Decode n latent samples under one condition class; no source text involved."""
    if n <= 0:
        raise ValueError("generation count must be positive")
    if not getattr(target, "frozen", False):
        raise ValueError("target model must be frozen before attacking")
    z_all = G.sample_latent(n, gen.d_z, seed)
    records = []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            z = z_all[lo : lo + batch_size]
            h0 = G.init_decoder_state(z, condition_class, gen)
            ids_batch = G.decode_beam_search_batch(h0, gen, beam_width, max_len)
            probs = predict_hard_batch(ids_batch, target)
            records += _finish_targeted(
                "unrestricted", ids_batch, [condition_class] * len(ids_batch),
                [target_class_map[condition_class]] * len(ids_batch), probs, vocab, None, seed)
    return records


def _baseline_record(name, x, new_ids, target, vocab) -> AttackRecord:
    probs = predict_hard(new_ids, target)
    predicted = int(probs.argmax())
    return AttackRecord(
        mode=f"baseline:{name}",
        condition_class=x.label,
        target_class=None,
        generated_text=decode_tokens(new_ids, vocab),
        generated_ids=tuple(new_ids),
        prediction=tuple(float(v) for v in probs),
        predicted_class=predicted,
        success=predicted != x.label,
        source_text=x.raw,
    )


def baseline_random(x: LabeledText, cfg: BaselineConfig, target: TextCNN,
                    vocab: Vocabulary, seed: int | None = None) -> AttackRecord:
    """Replace ceil(fraction * len) uniformly chosen positions with random
    non-special vocabulary words (never the word already there)."""
    rng = random.Random(cfg.seed if seed is None else seed)
    ids = list(x.ids)
    n_changes = math.ceil(cfg.modify_fraction * len(ids))
    content = [i for i in range(len(vocab)) if i not in vocab.special_ids]
    for pos in sorted(rng.sample(range(len(ids)), n_changes)):
        choices = [w for w in content if w != ids[pos]]
        ids[pos] = rng.choice(choices)
    return _baseline_record("random", x, tuple(ids), target, vocab)


def nearest_neighbor_word(v: torch.Tensor, table: torch.Tensor, special_ids=()) -> int:
    """Closest non-special row by Euclidean distance; ties take the smaller id."""
    if table.shape[0] == 0:
        raise ValueError("embedding table is empty")
    dist = ((table - v.reshape(1, -1)) ** 2).sum(dim=1)
    for s in special_ids:
        dist[s] = float("inf")
    min_val = dist.min()
    return int((dist == min_val).nonzero().min())


def baseline_fgsm_nns(x: LabeledText, cfg: BaselineConfig, target: TextCNN,
                      vocab: Vocabulary, top_fraction: float | None = None) -> AttackRecord:
    """One-shot sign-gradient perturbation of every word vector, then nearest
    neighbor replacement in the embedding table.

    top_fraction, if given, restricts the replacement to the positions with the
    largest gradient norms.
    """
    grads = input_gradients(x.ids, x.label, target)
    table = target.embedding.weight.detach()
    ids = list(x.ids)[: target.fixed_len]
    positions = range(len(ids))
    if top_fraction is not None:
        k = max(1, math.ceil(top_fraction * len(ids)))
        norms = grads.norm(dim=1)
        positions = sorted(torch.topk(norms, k).indices.tolist())
    new_ids = list(ids)
    for pos in positions:
        v = table[ids[pos]] + cfg.epsilon * torch.sign(grads[pos])
        new_ids[pos] = nearest_neighbor_word(v, table, vocab.special_ids)
    return _baseline_record("fgsm_nns", x, tuple(new_ids), target, vocab)


def deepfool_perturb(x: torch.Tensor, label: int, forward_fn, mask: torch.Tensor,
                     max_iters: int, overshoot: float = 0.02) -> tuple[torch.Tensor, int]:
    """Iterative minimal linearized perturbation for a binary classifier.

    x is the full (fixed_len, d_w) model input; mask marks the positions that
    may move. Stops once the prediction leaves `label` or after max_iters.
    Returns the perturbed input and the number of iterations taken.
    """
    current = x.detach().clone()
    other = 1 - label
    iters = 0
    while iters < max_iters:
        inp = current.detach().clone().requires_grad_(True)
        logits = forward_fn(inp.unsqueeze(0))[0]
        if int(logits.argmax()) != label:
            break
        g = logits[other] - logits[label]
        grad = torch.autograd.grad(g, inp)[0] * mask.unsqueeze(-1)
        norm_sq = float((grad ** 2).sum())
        if norm_sq == 0.0:
            break
        r = (g.detach().abs() + 1e-6) / norm_sq * grad
        current = current + (1.0 + overshoot) * r
        iters += 1
    return current, iters


def baseline_deepfool_nns(x: LabeledText, cfg: BaselineConfig, target: TextCNN,
                          vocab: Vocabulary) -> AttackRecord:
    """DeepFool in embedding space followed by per-position nearest-neighbor
    projection back onto words. Binary targets only."""
    if target.num_classes != 2:
        raise ValueError("DeepFool baseline supports binary targets only")
    ids = list(x.ids)[: target.fixed_len]
    padded = target.batch_ids([ids])
    emb = target.embedding(padded)[0].detach()
    mask = torch.zeros(target.fixed_len)
    mask[: len(ids)] = 1.0
    perturbed, _ = deepfool_perturb(emb, x.label, target.forward_embedded, mask,
                                    cfg.max_deepfool_iters, cfg.deepfool_overshoot)
    table = target.embedding.weight.detach()
    new_ids = [nearest_neighbor_word(perturbed[pos], table, vocab.special_ids)
               for pos in range(len(ids))]
    return _baseline_record("deepfool_nns", x, tuple(new_ids), target, vocab)


def run_baseline(name: str, texts: list[LabeledText], cfg: BaselineConfig, target: TextCNN,
                 vocab: Vocabulary) -> list[AttackRecord]:
    """Apply one baseline over a list of texts with per-record derived seeds."""
    records = []
    for i, x in enumerate(texts):
        if name == "random":
            records.append(baseline_random(x, cfg, target, vocab, seed=derive_seed(cfg.seed, f"random-{i}")))
        elif name == "fgsm_nns":
            records.append(baseline_fgsm_nns(x, cfg, target, vocab))
        elif name == "deepfool_nns":
            records.append(baseline_deepfool_nns(x, cfg, target, vocab))
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return records
