"""Loss assembly, KL annealing, VAE pretraining, and the joint min-max loop.

The joint loop follows a per-cycle sweep: sample one batch per class, update
the discriminators on detached generations, then update the generator on the
combined objective (reconstruction + weighted adversarial term + the
discriminator scores).
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field

import torch

from . import generator as G
from .config import ExperimentConfig, derive_seed, resolve_target_class_map
from .corpus import DatasetSplits, Vocabulary, encode_dataset
from .discriminators import ClassDiscriminators, disc_loss_k, generator_fool_loss
from .generator import CondVAE
from .target_model import TextCNN, TrainingDivergedError, make_optimizer, predict_soft


def kl_weight(step: int, ramp_start: int, ramp_end: int) -> float:
    """Linear KL annealing weight: 0 before the ramp, 1 after it."""
    if step <= ramp_start:
        return 0.0
    if step >= ramp_end:
        return 1.0
    return (step - ramp_start) / (ramp_end - ramp_start)


def gumbel_temperature(step: int, t_start: float, t_end: float, decay_steps: int) -> float:
    """Exponential decay from t_start to t_end over decay_steps."""
    if decay_steps <= 0 or step >= decay_steps:
        return t_end
    return t_start * (t_end / t_start) ** (step / decay_steps)


def vae_loss(logits: torch.Tensor, targets: torch.Tensor, mu: torch.Tensor,
             sigma: torch.Tensor, alpha: float, pad_id: int = 0):
    """(total, reconstruction, kl): summed token cross-entropy (PAD masked)
    plus the closed-form KL of a diagonal Gaussian against the standard normal,
    both averaged over the batch."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if mu.shape != sigma.shape:
        raise ValueError("mu and sigma must share a shape")
    log_probs = torch.log_softmax(logits, dim=-1)
    token_nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = (targets != pad_id).to(logits.dtype)
    recon = (token_nll * mask).sum(dim=-1).mean()
    kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - torch.log(sigma.pow(2))).sum(dim=-1).mean()
    return recon + alpha * kl, recon, kl


def adv_loss(probs: torch.Tensor, target_class, eps: float = 1e-12) -> torch.Tensor:
    """-log P_target(y_t), averaged over the batch."""
    if probs.dim() == 1:
        probs = probs.unsqueeze(0)
    target_class = torch.as_tensor(target_class, dtype=torch.long).reshape(-1)
    if target_class.numel() == 1 and probs.shape[0] > 1:
        target_class = target_class.expand(probs.shape[0])
    picked = probs.gather(1, target_class.unsqueeze(1)).squeeze(1)
    return -torch.log(picked + eps).mean()


def joint_loss(l_vae, l_adv, disc_losses, phi: float):
    total = l_vae + phi * l_adv
    for l in disc_losses:
        total = total + l
    return total


@dataclass
class TrainStepRecord:
    step: int
    l_vae: float
    recon: float
    kl: float
    alpha: float
    l_adv: float
    l_disc: tuple[float, ...]
    l_joint: float


@dataclass
class TrainLog:
    phi: float
    records: list[TrainStepRecord] = field(default_factory=list)

    def append(self, rec: TrainStepRecord) -> None:
        self.records.append(rec)

    def check_decomposition(self, tol: float = 1e-5) -> None:
        for rec in self.records:
            recombined = rec.l_vae + self.phi * rec.l_adv + sum(rec.l_disc)
            if abs(recombined - rec.l_joint) > tol:
                raise AssertionError(
                    f"step {rec.step}: joint loss {rec.l_joint} != recombination {recombined}")

    def to_csv(self, path) -> None:
        n_disc = len(self.records[0].l_disc) if self.records else 0
        header = ["step", "l_vae", "recon", "kl", "alpha", "l_adv"]
        header += [f"l_disc_{k}" for k in range(n_disc)] + ["l_joint"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# phi={self.phi!r}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in self.records:
                writer.writerow([r.step, repr(r.l_vae), repr(r.recon), repr(r.kl), repr(r.alpha),
                                 repr(r.l_adv)] + [repr(v) for v in r.l_disc] + [repr(r.l_joint)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            first = fh.readline().strip()
            if not first.startswith("# phi="):
                raise ValueError(f"{path}: missing phi header line")
            phi = float(first.split("=", 1)[1])
            reader = csv.reader(fh)
            header = next(reader)
            n_disc = sum(1 for name in header if name.startswith("l_disc_"))
            log = cls(phi=phi)
            for row in reader:
                step, l_vae, recon, kl, alpha, l_adv = row[:6]
                disc = tuple(float(v) for v in row[6 : 6 + n_disc])
                log.append(TrainStepRecord(int(step), float(l_vae), float(recon), float(kl),
                                           float(alpha), float(l_adv), disc, float(row[6 + n_disc])))
            return log


def make_decoder_batch(sequences, go_id: int, eos_id: int, pad_id: int):
    """(inputs, targets): GO-prefixed inputs and EOS-suffixed targets, PAD-extended."""
    width = max(len(s) for s in sequences) + 1
    inputs = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    targets = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        inputs[row, 0] = go_id
        inputs[row, 1 : len(seq) + 1] = torch.tensor(seq, dtype=torch.long)
        targets[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        targets[row, len(seq)] = eos_id
    return inputs, targets


class EpochBatchSampler:
    """Deterministic epoch-shuffled batch stream over a fixed item list."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        self.n = n_items
        self.batch_size = min(batch_size, n_items)
        self.rng = random.Random(seed)
        self._order: list[int] = []
        self._cursor = 0

    def next_batch(self) -> list[int]:
        if self._cursor + self.batch_size > len(self._order):
            self._order = list(range(self.n))
            self.rng.shuffle(self._order)
            self._cursor = 0
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


def _gen_vae_forward(gen: CondVAE, batch, labels, keep_rate: float, alpha: float,
                     stream: torch.Generator):
    """Shared encode/reparameterize/teacher-forced-decode pass for one batch."""
    enc = G.encode_batch([t.ids for t in batch], gen)
    eps = G.sample_eps(enc.mu.shape, stream, dtype=enc.mu.dtype)
    z = G.reparameterize(enc.mu, enc.sigma, eps)
    h0 = G.init_decoder_state(z, labels, gen)
    inputs, targets = make_decoder_batch([t.ids for t in batch], gen.go_id, gen.eos_id, gen.pad_id)
    logits = G.decode_teacher_forced(h0, inputs, keep_rate, gen, stream)
    total, recon, kl = vae_loss(logits, targets, enc.mu, enc.sigma, alpha, gen.pad_id)
    return logits, total, recon, kl


def pretrain_vae(splits: DatasetSplits, vocab: Vocabulary, cfg: ExperimentConfig,
                 seed: int | None = None) -> tuple[CondVAE, TrainLog]:
    """Train the conditional VAE on all classes with KL annealing and word dropout."""
    tc = cfg.training
    seed = tc.seed if seed is None else seed
    torch.manual_seed(derive_seed(seed, "vae-init"))
    gen = CondVAE(len(vocab), cfg.num_classes, cfg.d_emb, cfg.d_z, cfg.d_c, cfg.gen_hidden,
                  vocab.pad_id, vocab.unk_id, vocab.go_id, vocab.eos_id)
    train = encode_dataset(splits.train, vocab, cfg.max_len)
    opt = make_optimizer(gen, tc.lr_gen)
    sampler = EpochBatchSampler(len(train), tc.batch_size, derive_seed(seed, "vae-batches"))
    stream = torch.Generator().manual_seed(derive_seed(seed, "vae-noise"))
    log = TrainLog(phi=tc.phi)
    for step in range(tc.pretrain_steps):
        batch = [train[i] for i in sampler.next_batch()]
        alpha = kl_weight(step, tc.kl_ramp_start, tc.kl_ramp_end)
        labels = torch.tensor([t.label for t in batch])
        _, total, recon, kl = _gen_vae_forward(gen, batch, labels, tc.keep_rate, alpha, stream)
        if not torch.isfinite(total):
            raise TrainingDivergedError(f"VAE pretraining diverged (NaN loss) at step {step}")
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(gen.parameters(), tc.grad_clip)
        opt.step()
        value = float(total.detach())
        log.append(TrainStepRecord(step, value, float(recon.detach()), float(kl.detach()),
                                   alpha, 0.0, (), value))
    gen.eval()
    return gen, log


def dev_reconstruction_loss(gen: CondVAE, dev_texts, batch_size: int = 64) -> float:
    """Deterministic reconstruction NLL on encoded texts (posterior mean, no dropout)."""
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(dev_texts), batch_size):
            batch = dev_texts[lo : lo + batch_size]
            enc = G.encode_batch([t.ids for t in batch], gen)
            h0 = G.init_decoder_state(enc.mu, torch.tensor([t.label for t in batch]), gen)
            inputs, targets = make_decoder_batch([t.ids for t in batch], gen.go_id, gen.eos_id, gen.pad_id)
            logits = G.decode_teacher_forced(h0, inputs, 1.0, gen)
            _, recon, _ = vae_loss(logits, targets, enc.mu, enc.sigma, 0.0, gen.pad_id)
            total += float(recon) * len(batch)
            count += len(batch)
    return total / count


def reconstruct_greedy(gen: CondVAE, ids, label: int, max_len: int) -> tuple[int, ...]:
    """Greedy decode from the posterior mean; used for reconstruction checks."""
    with torch.no_grad():
        enc = G.encode(ids, gen)
        h0 = G.init_decoder_state(enc.mu, label, gen)
        return G.decode_beam_search(h0, gen, beam_width=1, max_len=max_len)


def train_joint(gen: CondVAE, target: TextCNN, discs: ClassDiscriminators | None,
                splits: DatasetSplits, vocab: Vocabulary, cfg: ExperimentConfig,
                seed: int | None = None, checkpoint_cb=None, checkpoint_every: int = 0):
    """Algorithm-style joint loop: per cycle, one batch per class, one
    discriminator update on the swept batches, one generator update on the
    combined objective. Returns (gen, discs, TrainLog)."""
    tc = cfg.training
    seed = tc.seed if seed is None else seed
    if not getattr(target, "frozen", False):
        raise ValueError("the targeted model must be frozen before joint training")
    use_disc = not tc.disable_disc
    if use_disc and discs is None:
        raise ValueError("discriminators required unless disable_disc is set")
    use_soft_path = use_disc or tc.phi > 0
    target_map = resolve_target_class_map(tc.target_class_map, cfg.num_classes)

    by_class = {k: encode_dataset(items, vocab, cfg.max_len)
                for k, items in sorted(splits.by_class.items())}
    classes = sorted(by_class)
    if len(classes) != cfg.num_classes:
        raise ValueError("every class needs training data for the joint loop")

    opt_g = make_optimizer(gen, tc.lr_gen)
    opt_d = make_optimizer(discs, tc.lr_disc) if use_disc else None
    samplers = {k: EpochBatchSampler(len(by_class[k]), tc.batch_size, derive_seed(seed, f"joint-batches-{k}"))
                for k in classes}
    stream = torch.Generator().manual_seed(derive_seed(seed, "joint-noise"))
    log = TrainLog(phi=tc.phi)
    gen.train()

    for cycle in range(tc.joint_cycles):
        temperature = gumbel_temperature(cycle, tc.t_start, tc.t_end, tc.t_decay_steps)
        alpha = 1.0  # annealing has saturated by the joint phase
        per_class = {}
        for k in classes:
            batch = [by_class[k][i] for i in samplers[k].next_batch()]
            logits, total, recon, kl = _gen_vae_forward(
                gen, batch, torch.full((len(batch),), k, dtype=torch.long), tc.keep_rate, alpha, stream)
            entry = {"vae": (total, recon, kl), "n": len(batch)}
            if use_soft_path:
                soft = G.gumbel_soften(logits, temperature, generator=stream)
                soft = G.pad_soft_sequence(soft, cfg.fixed_len, gen.pad_id)
                entry["fake_W_target"] = G.soft_embed(soft, target.embedding.weight.detach())
                if use_disc:
                    entry["fake_W_gen"] = G.soft_embed(soft, gen.embedding.weight)
                    real = G.one_hot_soft_batch([t.ids for t in batch], cfg.fixed_len,
                                                len(vocab), gen.pad_id, dtype=soft.dtype)
                    entry["real_W_gen"] = G.soft_embed(real, gen.embedding.weight)
            per_class[k] = entry

        disc_values = []
        if use_disc:
            for _ in range(max(1, tc.disc_steps)):
                d_losses = [disc_loss_k(per_class[k]["real_W_gen"].detach(),
                                        per_class[k]["fake_W_gen"].detach(), k, discs)
                            for k in classes]
                loss_d = -sum(d_losses)
                if not torch.isfinite(loss_d):
                    raise TrainingDivergedError(f"discriminator loss NaN at cycle {cycle}")
                opt_d.zero_grad()
                loss_d.backward()
                torch.nn.utils.clip_grad_norm_(discs.parameters(), tc.grad_clip)
                opt_d.step()

        l_vae = sum(per_class[k]["vae"][0] for k in classes) / len(classes)
        recon = sum(float(per_class[k]["vae"][1].detach()) for k in classes) / len(classes)
        kl = sum(float(per_class[k]["vae"][2].detach()) for k in classes) / len(classes)
        if use_soft_path:
            l_adv = sum(adv_loss(predict_soft(per_class[k]["fake_W_target"], target), target_map[k])
                        for k in classes) / len(classes)
        else:
            l_adv = torch.zeros(())
        g_disc_terms = []
        if use_disc:
            for k in classes:
                if tc.non_saturating:
                    g_disc_terms.append(generator_fool_loss(per_class[k]["fake_W_gen"], k, discs))
                else:
                    g_disc_terms.append(disc_loss_k(per_class[k]["real_W_gen"],
                                                    per_class[k]["fake_W_gen"], k, discs))
            disc_values = [float(v.detach()) for v in g_disc_terms]
        l_joint = joint_loss(l_vae, l_adv, g_disc_terms, tc.phi)
        if not torch.isfinite(l_joint):
            raise TrainingDivergedError(f"joint loss NaN at cycle {cycle}")
        opt_g.zero_grad()
        if opt_d is not None:
            opt_d.zero_grad()
        l_joint.backward()
        torch.nn.utils.clip_grad_norm_(gen.parameters(), tc.grad_clip)
        opt_g.step()

        # Log the float64 recombination so the decomposition invariant is exact.
        vae_value, adv_value = float(l_vae.detach()), float(l_adv.detach())
        logged_joint = vae_value + tc.phi * adv_value + sum(disc_values)
        log.append(TrainStepRecord(cycle, vae_value, recon, kl, alpha, adv_value,
                                   tuple(disc_values), logged_joint))
        if checkpoint_cb is not None and checkpoint_every > 0 and (cycle + 1) % checkpoint_every == 0:
            checkpoint_cb(cycle, gen, discs)
        if _early_stop(log, tc.early_stop_window, tc.early_stop_rel_change):
            break
    gen.eval()
    if discs is not None:
        discs.eval()
    return gen, discs, log


def _early_stop(log: TrainLog, window: int, rel_change: float) -> bool:
    if window <= 0 or len(log.records) < 2 * window:
        return False
    recent = [r.l_joint for r in log.records[-window:]]
    previous = [r.l_joint for r in log.records[-2 * window : -window]]
    prev_mean = sum(previous) / window
    if prev_mean == 0:
        return False
    return abs(sum(recent) / window - prev_mean) / abs(prev_mean) < rel_change


def moving_average_converged(log: TrainLog, fraction: float = 0.2) -> bool:
    """Convergence proxy: mean joint loss over the last fraction of steps does
    not exceed the mean over the first fraction."""
    n = len(log.records)
    k = max(1, int(n * fraction))
    first = sum(r.l_joint for r in log.records[:k]) / k
    last = sum(r.l_joint for r in log.records[-k:]) / k
    return last <= first or math.isclose(first, last, rel_tol=1e-9)
