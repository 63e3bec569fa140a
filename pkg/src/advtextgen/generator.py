"""Conditional VAE text generator: GRU encoder to a Gaussian latent, a
class-conditioned GRU decoder, a Gumbel-Softmax relaxation of the output
distribution, and deterministic beam-search decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import arrays_to_state_dict, check_vocab_hash, load_arrays, save_arrays, state_dict_to_arrays
from .corpus import Vocabulary

_EPS = 1e-20


@dataclass
class EncoderOutput:
    mu: torch.Tensor
    sigma: torch.Tensor
    h_n: torch.Tensor


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("Gumbel temperature must be positive")


class CondVAE(nn.Module):
    """Encoder/decoder GRU pair with a class embedding mixed into the initial state.

    Args:
        vocab_size: vocabulary size (shared by encoder/decoder embeddings).
        num_classes: number of condition classes.
        d_emb: word embedding width.
        d_z: latent width.
        d_c: class embedding width.
        hidden: GRU hidden width.
    """

    def __init__(self, vocab_size, num_classes, d_emb=64, d_z=32, d_c=8, hidden=128,
                 pad_id=0, unk_id=1, go_id=2, eos_id=3):
        super().__init__()
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.d_emb = d_emb
        self.d_z = d_z
        self.d_c = d_c
        self.hidden = hidden
        self.pad_id, self.unk_id, self.go_id, self.eos_id = pad_id, unk_id, go_id, eos_id
        self.embedding = nn.Embedding(vocab_size, d_emb)
        self.encoder = nn.GRU(d_emb, hidden, batch_first=True)
        self.to_mu = nn.Linear(hidden, d_z)
        self.to_log_sigma = nn.Linear(hidden, d_z)
        self.class_embedding = nn.Embedding(num_classes, d_c)
        self.init_state = nn.Linear(d_z + d_c, hidden)
        self.decoder = nn.GRU(d_emb, hidden, batch_first=True)
        self.out_proj = nn.Linear(hidden, vocab_size)

    @property
    def dtype(self) -> torch.dtype:
        return self.out_proj.weight.dtype


def encode_batch(sequences, model: CondVAE) -> EncoderOutput:
    """Gaussian posterior parameters for a batch of id sequences."""
    if any(len(s) == 0 for s in sequences):
        raise ValueError("cannot encode an empty sequence")
    lengths = torch.tensor([len(s) for s in sequences])
    max_len = int(lengths.max())
    padded = torch.full((len(sequences), max_len), model.pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        padded[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    out, _ = model.encoder(model.embedding(padded))
    h_n = out[torch.arange(len(sequences)), lengths - 1]
    mu = model.to_mu(h_n)
    sigma = torch.exp(model.to_log_sigma(h_n))
    return EncoderOutput(mu=mu, sigma=sigma, h_n=h_n)


def encode(ids, model: CondVAE) -> EncoderOutput:
    """Single-sequence encode; returns 1-D mu/sigma."""
    out = encode_batch([ids], model)
    return EncoderOutput(out.mu[0], out.sigma[0], out.h_n[0])


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + sigma * eps, elementwise."""
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ValueError("mu, sigma, eps must share a shape")
    return mu + sigma * eps


def sample_eps(shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


def sample_latent(n: int, d_z: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """n i.i.d. standard-normal latent draws, reproducible per seed."""
    if n < 1:
        raise ValueError("latent sample count must be at least 1")
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d_z, generator=g, dtype=dtype)


def init_decoder_state(z: torch.Tensor, class_ids, model: CondVAE) -> torch.Tensor:
    """Decoder initial hidden state from the concatenated [z, c_k]."""
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
    if class_ids.numel() == 1 and z.shape[0] > 1:
        class_ids = class_ids.expand(z.shape[0])
    if int(class_ids.min()) < 0 or int(class_ids.max()) >= model.num_classes:
        raise ValueError(f"class id out of range for |Y|={model.num_classes}")
    c = model.class_embedding(class_ids)
    h0 = model.init_state(torch.cat([z, c], dim=1))
    return h0[0] if squeeze else h0


def word_dropout_mask(shape, keep_rate: float, generator: torch.Generator | None = None,
                      dtype=torch.float32) -> torch.Tensor:
    """Independent Bernoulli(keep_rate) keep mask; False positions get UNK."""
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must lie in [0, 1]")
    return torch.rand(shape, generator=generator, dtype=dtype) < keep_rate


def decode_teacher_forced(h0: torch.Tensor, inputs: torch.Tensor, keep_rate: float,
                          model: CondVAE, generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-position output logits under teacher forcing with word dropout.

    inputs is a (B, L) id tensor whose first column is GO; positions failing an
    independent Bernoulli(keep_rate) draw are fed the UNK embedding instead.
    keep_rate=1 draws nothing from the generator stream.
    """
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must lie in [0, 1]")
    squeeze = h0.dim() == 1
    if squeeze:
        h0, inputs = h0.unsqueeze(0), inputs.unsqueeze(0)
    emb = model.embedding(inputs)
    if keep_rate < 1.0:
        keep = word_dropout_mask(inputs.shape, keep_rate, generator, emb.dtype).unsqueeze(-1)
        unk = model.embedding.weight[model.unk_id].reshape(1, 1, -1)
        emb = torch.where(keep, emb, unk)
    out, _ = model.decoder(emb, h0.unsqueeze(0).contiguous())
    logits = model.out_proj(out)
    return logits[0] if squeeze else logits


def output_distribution(u: torch.Tensor) -> torch.Tensor:
    """Softmax of the output logits (the decoder's emission distribution)."""
    return torch.softmax(u, dim=-1)


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + _EPS) + _EPS)


def gumbel_soften(u: torch.Tensor, temperature: float, noise: torch.Tensor | None = None,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Gumbel-Softmax relaxation softmax((log O + g) / t) of the emission distribution.

    Pass noise explicitly to share draws with a hard Gumbel-max decision, or a
    generator for a seeded stream; noise=None with no generator is only
    sensible in tests exercising the zero-noise identity.
    """
    if temperature <= 0:
        raise ValueError("Gumbel temperature must be positive")
    if noise is None:
        noise = sample_gumbel(u.shape, generator=generator, dtype=u.dtype)
    return torch.softmax((F.log_softmax(u, dim=-1) + noise) / temperature, dim=-1)


def gumbel_soften_cfg(u: torch.Tensor, cfg: GumbelConfig) -> torch.Tensor:
    g = torch.Generator().manual_seed(cfg.seed)
    return gumbel_soften(u, cfg.temperature, generator=g)


def soft_embed(soft: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Expected embeddings W_i = O_i . E for per-position vocabulary distributions."""
    if soft.shape[-1] != table.shape[0]:
        raise ValueError(f"distribution width {soft.shape[-1]} != embedding rows {table.shape[0]}")
    return soft @ table


def one_hot_soft(ids, fixed_len: int, vocab_size: int, pad_id: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot rows for a token sequence, PAD-extended to fixed_len."""
    ids = list(ids)[:fixed_len]
    rows = ids + [pad_id] * (fixed_len - len(ids))
    return F.one_hot(torch.tensor(rows, dtype=torch.long), vocab_size).to(dtype)


def one_hot_soft_batch(sequences, fixed_len: int, vocab_size: int, pad_id: int, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([one_hot_soft(s, fixed_len, vocab_size, pad_id, dtype) for s in sequences])


def pad_soft_sequence(soft: torch.Tensor, fixed_len: int, pad_id: int) -> torch.Tensor:
    """PAD-extend (B, L, |V|) distributions to (B, fixed_len, |V|) with one-hot PAD rows."""
    batch, length, vocab = soft.shape
    if length > fixed_len:
        raise ValueError(f"soft sequence of length {length} exceeds fixed length {fixed_len}")
    if length == fixed_len:
        return soft
    pad_row = F.one_hot(torch.tensor(pad_id), vocab).to(soft.dtype)
    tail = pad_row.expand(batch, fixed_len - length, vocab)
    return torch.cat([soft, tail], dim=1)


def decode_beam_search(h0: torch.Tensor, model: CondVAE, beam_width: int = 4,
                       max_len: int = 20) -> tuple[int, ...]:
    """Highest total-log-prob decode from one initial state; EOS terminator stripped."""
    return decode_beam_search_batch(h0.unsqueeze(0), model, beam_width, max_len)[0]


@torch.no_grad()
def decode_beam_search_batch(h0: torch.Tensor, model: CondVAE, beam_width: int = 4,
                             max_len: int = 20, min_len: int = 1) -> list[tuple[int, ...]]:
    """Batched deterministic beam search.

    Starts from GO and never emits GO or PAD. EOS competes for beam slots like
    any token; a slot that selects EOS finishes (best finished hypothesis kept
    per sample) and stays dead for the rest of the search, so beam_width=1
    reduces to greedy decoding. Hypotheses still alive at max_len compete as
    finished without an EOS term. Scores are summed log probabilities with no
    length normalization; ties prefer the smaller token id, then the smaller
    beam index. min_len masks EOS for the first emissions so generated texts
    are never empty.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    n, hidden = h0.shape
    device = h0.device
    vocab = model.vocab_size
    neg_inf = float("-inf")

    best_score = [neg_inf] * n
    best_ids: list[tuple[int, ...]] = [()] * n

    def absorb_finished(scores, tokens, prefixes):
        """Record slots that picked EOS and kill them."""
        hits = (tokens == model.eos_id) & torch.isfinite(scores)
        for sample, slot in hits.nonzero().tolist():
            s = float(scores[sample, slot])
            if s > best_score[sample]:
                best_score[sample] = s
                best_ids[sample] = tuple(int(t) for t in prefixes[sample, slot])
            scores[sample, slot] = neg_inf
        return scores

    # Step 0: expand GO from the provided state.
    go = torch.full((n, 1), model.go_id, dtype=torch.long, device=device)
    out, h = model.decoder(model.embedding(go), h0.unsqueeze(0).contiguous())
    logp = F.log_softmax(model.out_proj(out[:, 0]), dim=-1)
    logp[:, model.go_id] = neg_inf
    logp[:, model.pad_id] = neg_inf
    if min_len >= 1:
        logp[:, model.eos_id] = neg_inf
    scores, tokens = _select_topk(logp, min(beam_width, vocab))  # (n, W)
    scores = scores.clone()
    if tokens.shape[1] < beam_width:  # wider beam than the vocabulary: dead filler slots
        deficit = beam_width - tokens.shape[1]
        scores = torch.cat([scores, torch.full((n, deficit), neg_inf, dtype=scores.dtype)], dim=1)
        tokens = torch.cat([tokens, torch.full((n, deficit), model.pad_id, dtype=torch.long)], dim=1)
    empty_prefix = torch.zeros((n, beam_width, 0), dtype=torch.long, device=device)
    scores = absorb_finished(scores, tokens, empty_prefix)
    seqs = tokens.unsqueeze(-1)  # (n, W, 1)
    h = h[0].unsqueeze(1).expand(n, beam_width, hidden).reshape(n * beam_width, hidden)

    for step in range(1, max_len):
        if not torch.isfinite(scores).any():
            break
        prev = seqs[:, :, -1].reshape(n * beam_width, 1)
        out, h_next = model.decoder(model.embedding(prev), h.unsqueeze(0).contiguous())
        logp = F.log_softmax(model.out_proj(out[:, 0]), dim=-1).reshape(n, beam_width, vocab)
        logp[:, :, model.go_id] = neg_inf
        logp[:, :, model.pad_id] = neg_inf
        if step < min_len:
            logp[:, :, model.eos_id] = neg_inf
        cand = scores.unsqueeze(-1) + logp  # (n, W, V)

        flat_scores, flat_choice = _select_topk_pairs(cand)
        keep_scores = flat_scores[:, :beam_width].clone()
        keep = flat_choice[:, :beam_width]  # flat index = parent * V + token
        token = keep % vocab
        parent = keep // vocab
        prefixes = torch.gather(seqs, 1, parent.unsqueeze(-1).expand(-1, -1, seqs.shape[-1]))
        keep_scores = absorb_finished(keep_scores, token, prefixes)
        seqs = torch.cat([prefixes, token.unsqueeze(-1)], dim=-1)
        scores = keep_scores
        h_next = h_next[0].reshape(n, beam_width, hidden)
        h = torch.gather(h_next, 1, parent.unsqueeze(-1).expand(-1, -1, hidden)).reshape(n * beam_width, hidden)

    # Hypotheses alive at max_len compete without an EOS term.
    for sample in range(n):
        for slot in range(beam_width):
            s = float(scores[sample, slot])
            if s > best_score[sample]:
                best_score[sample] = s
                best_ids[sample] = tuple(int(t) for t in seqs[sample, slot])
    return best_ids


def _select_topk(logp: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k with ties resolved toward smaller token ids (stable sort)."""
    vals, idx = torch.sort(logp, dim=-1, descending=True, stable=True)
    return vals[:, :k], idx[:, :k]


def _select_topk_pairs(cand: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sort (n, W, V) candidates token-major so ties prefer smaller token, then beam."""
    n, width, vocab = cand.shape
    token_major = cand.transpose(1, 2).reshape(n, vocab * width)  # position = token * W + beam
    vals, pos = torch.sort(token_major, dim=-1, descending=True, stable=True)
    token = pos // width
    beam = pos % width
    return vals, beam * vocab + token


def save_generator(model: CondVAE, path, vocab: Vocabulary) -> None:
    metadata = {
        "kind": "generator",
        "vocab_hash": vocab.content_hash(),
        "vocab_size": model.vocab_size,
        "num_classes": model.num_classes,
        "d_emb": model.d_emb,
        "d_z": model.d_z,
        "d_c": model.d_c,
        "hidden": model.hidden,
    }
    save_arrays(path, state_dict_to_arrays(model.state_dict()), metadata)


def load_generator(path, vocab: Vocabulary) -> CondVAE:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path}: not a generator checkpoint")
    check_vocab_hash(meta, vocab, path)
    model = CondVAE(meta["vocab_size"], meta["num_classes"], meta["d_emb"],
                    meta["d_z"], meta["d_c"], meta["hidden"],
                    vocab.pad_id, vocab.unk_id, vocab.go_id, vocab.eos_id)
    model.load_state_dict(arrays_to_state_dict(arrays))
    model.eval()
    return model
