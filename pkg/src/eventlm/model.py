"""Compact causal decoder used as the sequence backbone.

Pre-norm blocks with rotary positions, RMSNorm and a SwiGLU feed-forward.
Besides the plain forward pass the model supports *branches*: short token
runs that continue a cached document from an arbitrary prefix length.  A
branch attends to ``doc[:prefix_len]`` and causally to itself, with positions
continuing at ``prefix_len``, so its outputs are identical to running
``doc[:prefix_len] + branch`` through :meth:`DecoderLM.forward`.  Training and
evaluation use this to score many prompts of one sequence with a single pass
over the shared history.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import VOCAB
from .errors import ContextOverflow, EmptyLossMask


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB.size
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_context_len: int = 1024
    dropout_rate: float = 0.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return asdict(self)


def _rotate(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary embedding. x: [B, H, S, D]; positions: [B, S] or [S]."""
    half = x.shape[-1] // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) / half)
    angles = positions.to(x.dtype)[..., None] * freqs  # [B?, S, half]
    if angles.dim() == 3:
        angles = angles[:, None]  # broadcast over heads
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.rope_base = cfg.rope_base
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def project(self, x, positions):
        B, S, _ = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return _rotate(q, positions, self.rope_base), _rotate(k, positions, self.rope_base), v

    def merge(self, y):
        B, H, S, D = y.shape
        return self.out(y.transpose(1, 2).reshape(B, S, H * D))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gate = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.up = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.down = nn.Linear(cfg.d_ff, cfg.d_model, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.attn = Attention(cfg)
        self.norm2 = nn.RMSNorm(cfg.d_model, eps=1e-6)
        self.ff = FeedForward(cfg)
        self.drop = nn.Dropout(cfg.dropout_rate)


class DocCache:
    """Per-layer rotated keys and values of a document pass."""

    def __init__(self, keys, values, log_probs, hidden):
        self.keys = keys
        self.values = values
        self.log_probs = log_probs  # [L, V]
        self.hidden = hidden  # [L, d]

    def __len__(self):
        return self.keys[0].shape[2]


class DecoderLM(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.embed = nn.Embedding(self.cfg.vocab_size, self.cfg.d_model)
        self.blocks = nn.ModuleList(Block(self.cfg) for _ in range(self.cfg.n_layers))
        self.norm = nn.RMSNorm(self.cfg.d_model, eps=1e-6)
        self.lm_head = nn.Linear(self.cfg.d_model, self.cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        for name, p in self.named_parameters():
            if p.dim() == 1:
                nn.init.ones_(p) if "norm" in name else nn.init.zeros_(p)
            else:
                std = 0.02
                if name.endswith(("out.weight", "down.weight")):
                    std /= math.sqrt(2 * self.cfg.n_layers)
                with torch.no_grad():
                    p.normal_(0.0, std, generator=generator)

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def _check_len(self, n: int):
        if n > self.cfg.max_context_len:
            raise ContextOverflow(f"{n} tokens exceed the context of {self.cfg.max_context_len}")

    def forward(self, tokens) -> tuple[torch.Tensor, torch.Tensor]:
        """Next-token log-probabilities [B, L, V] and final hidden states [B, L, d]."""
        logp, hidden, _ = self._run(tokens, keep_cache=False)
        return logp, hidden

    def prefill(self, tokens) -> DocCache:
        logp, hidden, (keys, values) = self._run(tokens, keep_cache=True)
        return DocCache(keys, values, logp[0], hidden[0])

    def _run(self, tokens, keep_cache):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        self._check_len(tokens.shape[1])
        positions = torch.arange(tokens.shape[1])
        x = self.embed(tokens)
        keys, values = [], []
        for blk in self.blocks:
            q, k, v = blk.attn.project(blk.norm1(x), positions)
            if keep_cache:
                keys.append(k)
                values.append(v)
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            x = x + blk.drop(blk.attn.merge(y))
            x = x + blk.drop(blk.ff(blk.norm2(x)))
        hidden = self.norm(x)
        return F.log_softmax(self.lm_head(hidden), dim=-1), hidden, (keys, values)

    def branches(self, cache: DocCache, prefix_lens, tokens, past=None, return_past: bool = False):
        """Continue the cached document from per-branch prefix lengths.

        prefix_lens: [B] ints in [0, len(cache)]; tokens: [B, S].
        Returns log-probabilities [B, S, V] and hidden states [B, S, d].
        ``past`` holds per-layer (keys, values) of earlier branch tokens, as
        returned with ``return_past=True``, so decoding can feed one token at a time.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        prefix = torch.as_tensor(prefix_lens, dtype=torch.long)
        B, S = tokens.shape
        done = past[0][0].shape[2] if past else 0
        self._check_len(int(prefix.max()) + done + S)
        L = int(prefix.max())
        positions = prefix[:, None] + done + torch.arange(S)[None, :]
        doc_mask = torch.arange(L)[None, :] < prefix[:, None]  # [B, L]
        own_mask = torch.arange(done + S)[None, :] <= done + torch.arange(S)[:, None]  # [S, done + S]
        neg = torch.finfo(self.dtype).min
        x = self.embed(tokens)
        new_past = []
        for i, (blk, k_doc, v_doc) in enumerate(zip(self.blocks, cache.keys, cache.values)):
            k_doc, v_doc = k_doc[:, :, :L], v_doc[:, :, :L]
            q, k, v = blk.attn.project(blk.norm1(x), positions)
            if past:
                k = torch.cat([past[i][0], k], dim=2)
                v = torch.cat([past[i][1], v], dim=2)
            new_past.append((k, v))
            scale = 1.0 / math.sqrt(q.shape[-1])
            H, dh = q.shape[1], q.shape[-1]
            # fold branches into rows so the shared document keys are never copied per branch
            q_rows = q.transpose(0, 1).reshape(H, B * S, dh)
            s_doc = torch.bmm(q_rows, k_doc[0].transpose(1, 2)).view(H, B, S, L).transpose(0, 1) * scale
            s_doc = s_doc.masked_fill(~doc_mask[:, None, None, :], neg)
            s_own = torch.matmul(q, k.transpose(-1, -2)) * scale  # [B, H, S, done + S]
            s_own = s_own.masked_fill(~own_mask, neg)
            p = torch.softmax(torch.cat([s_doc, s_own], dim=-1), dim=-1)
            p_doc = p[..., :L].transpose(0, 1).reshape(H, B * S, L)
            y_doc = torch.bmm(p_doc, v_doc[0]).view(H, B, S, dh).transpose(0, 1)
            y = y_doc + torch.matmul(p[..., L:], v)
            x = x + blk.drop(blk.attn.merge(y))
            x = x + blk.drop(blk.ff(blk.norm2(x)))
        hidden = self.norm(x)
        logp = F.log_softmax(self.lm_head(hidden), dim=-1)
        if return_past:
            return logp, hidden, new_past
        return logp, hidden


def _target_mask(tokens: torch.Tensor, mask) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != tokens.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match tokens {tuple(tokens.shape)}")
    target = mask[1:]  # position 0 has no context and is never a target
    if not bool(target.any()):
        raise EmptyLossMask("no target position is marked")
    return target


def nll_loss(model: DecoderLM, tokens, mask=None) -> torch.Tensor:
    """Mean of -log P(x_l | x_<l) over marked target positions l >= 1.

    ``mask[l]`` marks token ``l`` as a target; ``mask[0]`` is ignored. Without a
    mask every position 1..L-1 counts.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if mask is None:
        mask = torch.ones_like(tokens, dtype=torch.bool)
    target = _target_mask(tokens, mask)
    logp, _ = model(tokens)
    picked = logp[0, :-1].gather(-1, tokens[1:, None])[:, 0]
    return -(picked[target]).mean()


def gradients(model: DecoderLM, tokens, mask=None) -> dict[str, torch.Tensor]:
    """Gradient of :func:`nll_loss` for every parameter; frozen tensors get zeros."""
    params = dict(model.named_parameters())
    trainable = [n for n, p in params.items() if p.requires_grad]
    loss = nll_loss(model, tokens, mask)
    grads = torch.autograd.grad(loss, [params[n] for n in trainable], allow_unused=True)
    out = {n: torch.zeros_like(p) for n, p in params.items()}
    for n, g in zip(trainable, grads):
        if g is not None:
            out[n] = g
    return out


@dataclass(frozen=True)
class Sampling:
    """Temperature / nucleus sampling strategy."""

    temperature: float = 1.0
    top_p: float = 1.0


GREEDY = "greedy"


def _pick(logp: torch.Tensor, strategy, generator: torch.Generator | None) -> torch.Tensor:
    """Choose one token per row of ``logp`` [B, V]."""
    if strategy == GREEDY:
        return logp.argmax(dim=-1)
    logits = logp / max(strategy.temperature, 1e-6)
    probs = torch.softmax(logits.double(), dim=-1)
    if strategy.top_p < 1.0:
        sorted_p, order = probs.sort(dim=-1, descending=True)
        keep = sorted_p.cumsum(dim=-1) - sorted_p < strategy.top_p
        sorted_p = sorted_p * keep
        probs = torch.zeros_like(probs).scatter(-1, order, sorted_p)
    return torch.multinomial(probs, 1, generator=generator)[:, 0]


@torch.no_grad()
def decode_branches(
    model: DecoderLM,
    cache: DocCache,
    prefix_lens,
    start_tokens,
    strategy=GREEDY,
    max_new: int = 32,
    generator: torch.Generator | None = None,
    eos: int = VOCAB.eos,
) -> list[list[int]]:
    """Autoregressively extend branches that start with ``start_tokens`` [B, S0].

    With S0 == 0 every branch continues directly after its prefix, whose last
    position must then be ``len(cache)``.
    """
    prefix = torch.as_tensor(prefix_lens, dtype=torch.long)
    branch = torch.as_tensor(start_tokens, dtype=torch.long).reshape(len(prefix), -1)
    room = model.cfg.max_context_len - int(prefix.max()) - branch.shape[1]
    max_new = min(max_new, room)
    if max_new <= 0:
        return [[] for _ in range(len(prefix))]
    past = None
    if branch.shape[1] == 0:
        last = cache.log_probs[prefix - 1]
    else:
        logp, _, past = model.branches(cache, prefix, branch, return_past=True)
        last = logp[:, -1]
    out = torch.empty(len(prefix), 0, dtype=torch.long)
    done = torch.zeros(len(prefix), dtype=torch.bool)
    for step in range(max_new):
        tok = _pick(last, strategy, generator)
        tok = torch.where(done, torch.full_like(tok, eos), tok)
        out = torch.cat([out, tok[:, None]], dim=1)
        done |= tok == eos
        if bool(done.all()) or step == max_new - 1:
            break
        logp, _, past = model.branches(cache, prefix, tok[:, None], past, return_past=True)
        last = logp[:, -1]
    result = []
    for row in out.tolist():
        if eos in row:
            row = row[: row.index(eos) + 1]
        result.append(row)
    return result


def generate(
    model: DecoderLM,
    prompt_tokens: Sequence[int],
    strategy=GREEDY,
    max_new: int = 32,
    seed: int = 0,
    num_samples: int = 1,
) -> list[int] | list[list[int]]:
    """Emit tokens after ``prompt_tokens`` until end of sequence or ``max_new``.

    Returns one token list, or ``num_samples`` lists when more than one is asked.
    """
    if max_new <= 0:
        return [] if num_samples == 1 else [[] for _ in range(num_samples)]
    with torch.no_grad():
        cache = model.prefill(list(prompt_tokens))
    gen = torch.Generator().manual_seed(seed)
    rows = decode_branches(
        model,
        cache,
        [len(prompt_tokens)] * num_samples,
        torch.empty(num_samples, 0, dtype=torch.long),
        strategy,
        max_new,
        gen,
    )
    return rows[0] if num_samples == 1 else rows
