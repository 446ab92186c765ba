"""Transformer building blocks, optimizer, losses and sampling.

Built on torch (CPU, float32 for training); every differentiable piece
is verified against central finite differences at float64 by the test
suite, see ``central_difference_check``. Dropout is active only in train
mode; gradient checks and evaluation run in eval mode.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"HNCK"


@dataclass
class BlockConfig:
    d_model: int = 256
    d_ff: int = 512
    heads: int = 8
    dropout: float = 0.1
    pre_ln: bool = True
    layers: dict = field(
        default_factory=lambda: {"vqvae": 4, "encoder": 6, "decoder": 6}
    )

    def __post_init__(self):
        assert self.d_model % self.heads == 0, "d_model must divide by head count"


def init_weights(module):
    """Truncated normal (sigma 0.02) weights, zero biases, unit LN gains."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, q, kv, attn_mask=None):
        # q: (B, Tq, D), kv: (B, Tk, D); attn_mask True = keep
        b, tq, d = q.shape
        tk = kv.shape[1]
        qh = self.q_proj(q).view(b, tq, self.heads, self.d_head).transpose(1, 2)
        kh = self.k_proj(kv).view(b, tk, self.heads, self.d_head).transpose(1, 2)
        vh = self.v_proj(kv).view(b, tk, self.heads, self.d_head).transpose(1, 2)
        scores = qh @ kh.transpose(-2, -1) / self.d_head**0.5
        row_any = None
        if attn_mask is not None:
            # rows with no valid key stay unmasked here and are zeroed
            # below, so softmax never sees an all -inf row
            row_any = attn_mask.any(dim=-1, keepdim=True)
            scores = scores.masked_fill(row_any & ~attn_mask, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = attn @ vh
        if row_any is not None:
            out = out * row_any
        out = out.transpose(1, 2).reshape(b, tq, d)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class SelfAttentionBlock(nn.Module):
    """Pre-LN self-attention + residual, then pre-LN feed-forward + residual."""

    def __init__(self, config):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.heads, config.dropout)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.d_ff, config.dropout)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, attn_mask=None):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, attn_mask))
        x = x + self.drop(self.ff(self.ln2(x)))
        return x


class CrossAttentionBlock(nn.Module):
    """Pre-LN cross-attention + residual (keys/values from memory)."""

    def __init__(self, config):
        super().__init__()
        self.ln_q = nn.LayerNorm(config.d_model)
        self.ln_m = nn.LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.heads, config.dropout)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x, memory, mem_mask=None):
        # mem_mask: (B, 1, 1, Tk) bool, True = attend
        x = x + self.drop(self.attn(self.ln_q(x), self.ln_m(memory), mem_mask))
        return x


def causal_mask(t, device=None):
    return torch.tril(torch.ones(t, t, dtype=torch.bool, device=device)).view(1, 1, t, t)


class WarmupAdamW:
    """AdamW with linear learning-rate warmup, then a constant rate.

    lr(step) = base_lr * min(1, step / warmup); step counts from 1.
    """

    def __init__(self, params, lr=0.001, warmup=2000, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.base_lr = lr
        self.warmup = warmup
        self.step_count = 0
        self.opt = torch.optim.AdamW(
            params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay
        )

    @property
    def current_lr(self):
        t = max(1, self.step_count)
        return self.base_lr * min(1.0, t / self.warmup)

    def step(self):
        self.step_count += 1
        lr = self.base_lr * min(1.0, self.step_count / self.warmup)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def config(self):
        g = self.opt.param_groups[0]
        return {
            "lr": self.base_lr,
            "warmup": self.warmup,
            "betas": list(g["betas"]),
            "eps": g["eps"],
            "weight_decay": g["weight_decay"],
        }


def squared_emd_loss(logits, target, reduction="mean"):
    """Squared earth-mover loss over ordinal classes.

    Softmax the logits, compare CDFs: sum_k (CDF_p(k) - CDF_target(k))^2
    where the target CDF is the unit step at the target class. For a
    one-hot prediction at class j against target k the value is |j - k|.
    """
    return squared_emd_from_probs(torch.softmax(logits, dim=-1), target, reduction)


def squared_emd_from_probs(probs, target, reduction="mean"):
    """Squared-EMD between a probability vector and a one-hot target."""
    cdf = torch.cumsum(probs, dim=-1)
    k = probs.shape[-1]
    steps = torch.arange(k, device=probs.device).expand(probs.shape)
    target_cdf = (steps >= target.unsqueeze(-1)).to(probs.dtype)
    loss = ((cdf - target_cdf) ** 2).sum(dim=-1)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def cross_entropy_loss(logits, target, reduction="mean"):
    return F.cross_entropy(logits, target, reduction=reduction)


def nucleus_sample(probs, p, rng):
    """Top-p sampling: smallest descending prefix with mass >= p, renormalized.

    Ties sort by lower class index first; p -> 0 degenerates to argmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    assert 0.0 < p <= 1.0
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, p - 1e-12)) + 1
    support = order[:cut]
    weights = probs[support]
    weights = weights / weights.sum()
    return int(rng.choice(support, p=weights))


# ---------------------------------------------------------------------------
# finite-difference verification


def central_difference_check(fn, tensors, h=1e-5):
    """Max relative error between autograd and central-difference gradients.

    ``fn`` maps the (float64, requires_grad) tensors to a scalar. The
    relative error per tensor is ||ga - gn|| / max(||ga|| + ||gn||, 1e-12).
    """
    for t in tensors:
        assert t.dtype == torch.float64 and t.requires_grad
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    for t, ga in zip(tensors, grads):
        gn = torch.zeros_like(t)
        flat = t.data.view(-1)
        gflat = gn.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            hi = fn(*tensors).item()
            flat[i] = orig - h
            lo = fn(*tensors).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        num = (ga - gn).norm().item()
        den = max(ga.norm().item() + gn.norm().item(), 1e-12)
        worst = max(worst, num / den)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, module, config=None):
    """Named-parameter flat file: magic, JSON header, LE float32 payload."""
    state = module.state_dict()
    names = list(state.keys())
    header = {
        "names": names,
        "shapes": [list(state[n].shape) for n in names],
        "config": config or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(state[n].detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path, module=None):
    """Returns (state_dict, config); loads into ``module`` when given."""
    with open(path, "rb") as f:
        data = f.read()
    assert data[:4] == CHECKPOINT_MAGIC, "not a checkpoint file"
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen].decode())
    off = 8 + hlen
    state = {}
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data[off : off + 4 * n], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        off += 4 * n
    if module is not None:
        module.load_state_dict(state)
    return state, header["config"]
