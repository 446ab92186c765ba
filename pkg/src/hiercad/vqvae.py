"""Level-specific VQ-VAEs with masked skip connections.

One model per hierarchy level (loop / profile / solid). Tokens are
tuples of ordinal classes over 65 labels (64 coordinate bins plus SEP,
which is only legal at the loop level). The encoder pools to a single
vector, quantized against an EMA-updated codebook; the decoder sees the
code plus the masked token sequence and reconstructs the masked slots.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import nn as hnn
from .errors import ValidationError
from .hierarchy import SEP, LoopProperty, ProfileProperty, SolidProperty

N_CLASSES = 65
SEP_CLASS = 64
EMB_DIM = 32
D_MODEL = 256
MASK_RATIO_RANGE = (0.3, 0.7)
EMA_DECAY = 0.99
EMA_EPS = 1e-5
DEAD_CODE_THRESHOLD = 7
COMMITMENT_BETA = 0.25


@dataclass(frozen=True)
class LevelSpec:
    name: str
    tuple_size: int
    max_len: int
    codebook_k: int
    sep_allowed: bool


LEVELS = {
    "loop": LevelSpec("loop", 2, 299, 2500, True),
    "profile": LevelSpec("profile", 4, 20, 3500, False),
    "solid": LevelSpec("solid", 6, 5, 3500, False),
}


def tokenize_level(prop):
    """Class-tuple array (T, tuple_size) for one property."""
    if isinstance(prop, LoopProperty):
        rows = [
            (SEP_CLASS, SEP_CLASS) if t == SEP else (t[0], t[1]) for t in prop.tokens
        ]
    elif isinstance(prop, ProfileProperty):
        rows = list(prop.boxes)
    elif isinstance(prop, SolidProperty):
        rows = list(prop.boxes)
    else:
        raise TypeError(f"not a level property: {type(prop).__name__}")
    arr = np.asarray(rows, dtype=np.int64)
    if arr.min() < 0 or arr.max() > SEP_CLASS:
        raise ValidationError("class out of range", code="class_range")
    return arr


def level_of(prop):
    if isinstance(prop, LoopProperty):
        return LEVELS["loop"]
    if isinstance(prop, ProfileProperty):
        return LEVELS["profile"]
    return LEVELS["solid"]


def make_mask(length, rng):
    """Boolean mask with ratio drawn from [0.3, 0.7].

    Guarantees at least one masked and one unmasked position whenever
    length >= 2; a single-position sequence is fully masked.
    """
    if length == 1:
        return np.array([True])
    ratio = rng.uniform(*MASK_RATIO_RANGE)
    k = int(round(ratio * length))
    k = min(max(k, 1), length - 1)
    mask = np.zeros(length, dtype=bool)
    mask[rng.choice(length, size=k, replace=False)] = True
    return mask


class Codebook(nn.Module):
    """K learnable vectors with EMA accumulators and usage counters."""

    def __init__(self, level, k=None, dim=D_MODEL):
        super().__init__()
        spec = LEVELS[level]
        k = k or spec.codebook_k
        self.level = level
        self.k = k
        init = torch.empty(k, dim).uniform_(-1.0 / k, 1.0 / k)
        self.register_buffer("vectors", init)
        self.register_buffer("ema_count", torch.ones(k))
        self.register_buffer("ema_sum", init.clone())
        self.register_buffer("usage", torch.zeros(k))

    def quantize(self, pooled):
        """Nearest codes for (B, D) pooled vectors; straight-through output.

        Ties resolve to the lowest index. The returned tensor carries the
        codebook value forward but routes gradients straight to ``pooled``.
        """
        d = (
            pooled.pow(2).sum(1, keepdim=True)
            - 2 * pooled @ self.vectors.t()
            + self.vectors.pow(2).sum(1)
        )
        indices = d.argmin(dim=1)
        c = self.vectors[indices]
        c_st = pooled + (c - pooled).detach()
        return indices, c_st

    def ema_update(self, pooled, indices, decay=EMA_DECAY):
        """N_i <- dN_i + (1-d)n_i; m_i <- dm_i + (1-d)sum; b_i <- m_i/max(N_i, eps)."""
        with torch.no_grad():
            k = self.k
            one_hot = torch.zeros(len(indices), k, dtype=pooled.dtype)
            one_hot[torch.arange(len(indices)), indices] = 1.0
            n = one_hot.sum(0)
            s = one_hot.t() @ pooled.detach()
            self.ema_count.mul_(decay).add_((1 - decay) * n)
            self.ema_sum.mul_(decay).add_((1 - decay) * s)
            self.vectors.copy_(self.ema_sum / self.ema_count.clamp(min=EMA_EPS).unsqueeze(1))
            self.usage.add_(n)

    def reinit_dead_codes(self, pool, rng, threshold=DEAD_CODE_THRESHOLD):
        """Reset codes with epoch usage < threshold to random recent vectors.

        Returns the reinitialized indices; usage counters are zeroed.
        """
        with torch.no_grad():
            dead = torch.nonzero(self.usage < threshold).squeeze(1)
            if len(pool) == 0:
                if len(dead):
                    import warnings

                    warnings.warn("no recent vectors to reinit dead codes from")
                self.usage.zero_()
                return []
            pool_t = torch.as_tensor(np.asarray(pool), dtype=self.vectors.dtype)
            picks = rng.integers(0, len(pool_t), size=len(dead))
            for di, pi in zip(dead.tolist(), picks):
                v = pool_t[pi]
                self.vectors[di] = v
                self.ema_sum[di] = v
                self.ema_count[di] = 1.0
            self.usage.zero_()
            return dead.tolist()


class VqVae(nn.Module):
    """Encoder, pooled quantization and masked-skip decoder for one level."""

    def __init__(self, level, k=None, config=None):
        super().__init__()
        self.spec = LEVELS[level]
        self.config = config or hnn.BlockConfig()
        c = self.config
        ts = self.spec.tuple_size
        self.w_emb = nn.Embedding(N_CLASSES, EMB_DIM)
        self.mask_token = nn.Parameter(torch.zeros(EMB_DIM))
        self.mlp = nn.Sequential(
            nn.Linear(ts * EMB_DIM, c.d_model), nn.ReLU(), nn.Linear(c.d_model, c.d_model)
        )
        self.pos = nn.Parameter(torch.zeros(self.spec.max_len, c.d_model))
        n_layers = c.layers.get("vqvae", 4)
        self.encoder = nn.ModuleList(hnn.SelfAttentionBlock(c) for _ in range(n_layers))
        self.decoder = nn.ModuleList(hnn.SelfAttentionBlock(c) for _ in range(n_layers))
        self.head = nn.Sequential(
            nn.Linear(c.d_model, c.d_model), nn.ReLU(), nn.Linear(c.d_model, ts * N_CLASSES)
        )
        self.codebook = Codebook(level, k, dim=c.d_model)
        self.apply(hnn.init_weights)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def embed_tokens(self, classes, mask=None):
        """Eq.-style embedding: per-class lookups, concat, MLP, + position.

        ``classes`` is (B, T, tuple_size) long; masked positions replace
        the concatenated lookups with the repeated 32-D mask token.
        """
        b, t, ts = classes.shape
        if t > self.spec.max_len:
            raise ValidationError(
                f"{self.spec.name} sequence length {t} over cap {self.spec.max_len}",
                code="level_length",
            )
        emb = self.w_emb(classes).reshape(b, t, ts * EMB_DIM)
        if mask is not None:
            rep = self.mask_token.repeat(ts)
            emb = torch.where(mask.unsqueeze(-1), rep.expand(b, t, -1), emb)
        return self.mlp(emb) + self.pos[:t]

    def encode(self, classes, valid=None):
        """Pooled encoder vector (no masking; inference path)."""
        x = self.embed_tokens(classes)
        attn = None
        if valid is not None:
            attn = valid.view(valid.shape[0], 1, 1, -1)
        for block in self.encoder:
            x = block(x, attn)
        if valid is None:
            return x.mean(dim=1)
        w = valid.unsqueeze(-1).to(x.dtype)
        return (x * w).sum(1) / w.sum(1).clamp(min=1)

    def decode_masked(self, c, masked_embed, valid=None):
        """Code vector prepended to masked embeddings; logits per position."""
        b, t, _ = masked_embed.shape
        x = torch.cat([c.unsqueeze(1), masked_embed], dim=1)
        attn = None
        if valid is not None:
            keep = torch.cat([torch.ones(b, 1, dtype=torch.bool), valid], dim=1)
            attn = keep.view(b, 1, 1, t + 1)
        for block in self.decoder:
            x = block(x, attn)
        logits = self.head(x[:, 1:])  # code row emits nothing
        return logits.view(b, t, self.spec.tuple_size, N_CLASSES)

    def forward(self, classes, mask, valid=None):
        pooled = self.encode(classes, valid)
        indices, c_st = self.codebook.quantize(pooled)
        masked_embed = self.embed_tokens(classes, mask)
        logits = self.decode_masked(c_st, masked_embed, valid)
        return logits, pooled, c_st, indices


def vqvae_loss(logits, targets, mask, pooled, c_st, level="loop", beta=COMMITMENT_BETA):
    """Masked reconstruction + commitment; codebook distance is a metric only.

    Squared EMD per masked tuple slot, except slots whose target class is
    SEP at the loop level, which use cross entropy (SEP is not ordinal).
    The codebook term is realized by EMA updates, so it is reported
    detached and never back-propagated.
    """
    sep_allowed = LEVELS[level].sep_allowed
    m = mask.unsqueeze(-1).expand(targets.shape)
    flat_logits = logits[m]
    flat_targets = targets[m]
    if len(flat_targets):
        flat_logits = flat_logits.view(-1, N_CLASSES)
        if sep_allowed:
            is_sep = flat_targets == SEP_CLASS
            recon = torch.zeros((), dtype=logits.dtype)
            if (~is_sep).any():
                recon = recon + hnn.squared_emd_loss(
                    flat_logits[~is_sep], flat_targets[~is_sep], reduction="sum"
                )
            if is_sep.any():
                recon = recon + hnn.cross_entropy_loss(
                    flat_logits[is_sep], flat_targets[is_sep], reduction="sum"
                )
        else:
            recon = hnn.squared_emd_loss(flat_logits, flat_targets, reduction="sum")
    else:
        recon = torch.zeros((), dtype=logits.dtype)
    # commitment: ||pooled - sg[c]||^2; c_st carries c's forward value
    commit = beta * (pooled - c_st.detach()).pow(2).sum()
    codebook_metric = (pooled.detach() - c_st.detach()).pow(2).sum()
    total = recon + commit
    return {
        "total": total,
        "recon": recon,
        "commit": commit,
        "codebook": codebook_metric,
    }


# ---------------------------------------------------------------------------
# batching and training


def pad_batch(arrays, max_len):
    """Stack variable-length (T, ts) class arrays; returns (classes, valid)."""
    ts = arrays[0].shape[1]
    b = len(arrays)
    t = min(max(len(a) for a in arrays), max_len)
    classes = np.zeros((b, t, ts), dtype=np.int64)
    valid = np.zeros((b, t), dtype=bool)
    for i, a in enumerate(arrays):
        n = min(len(a), t)
        classes[i, :n] = a[:n]
        valid[i, :n] = True
    return torch.from_numpy(classes), torch.from_numpy(valid)


def train_vqvae(
    items,
    level,
    k=None,
    steps=2000,
    batch_size=64,
    seed=0,
    lr=0.001,
    warmup=2000,
    config=None,
    steps_per_epoch=100,
    log_every=None,
):
    """Train one level's VQ-VAE on tokenized properties.

    ``items`` are class arrays from tokenize_level. Dead codes are
    reinitialized from recently pooled vectors at epoch boundaries.
    Returns (model, history).
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    config = config or hnn.BlockConfig()
    model = VqVae(level, k=k, config=config)
    model.train()
    opt = hnn.WarmupAdamW(model.parameters(), lr=lr, warmup=warmup)
    history = []
    recent_pooled = []
    for step in range(1, steps + 1):
        pick = rng.integers(0, len(items), size=min(batch_size, len(items)))
        batch = [items[i] for i in pick]
        classes, valid = pad_batch(batch, LEVELS[level].max_len)
        mask = torch.from_numpy(
            np.stack([_padded_mask(len(a), classes.shape[1], rng) for a in batch])
        )
        mask &= valid
        logits, pooled, c_st, indices = model(classes, mask, valid)
        losses = vqvae_loss(logits, classes, mask, pooled, c_st, level=level)
        opt.zero_grad()
        (losses["total"] / len(batch)).backward()
        opt.step()
        model.codebook.ema_update(pooled, indices)
        recent_pooled.extend(pooled.detach().numpy())
        recent_pooled = recent_pooled[-1024:]
        if step % steps_per_epoch == 0:
            model.codebook.reinit_dead_codes(recent_pooled, rng)
        history.append(float(losses["total"].item()) / len(batch))
        if log_every and step % log_every == 0:
            print(f"[{level}] step {step} loss {history[-1]:.4f}")
    model.eval()
    return model, history


def _padded_mask(n, t, rng):
    m = np.zeros(t, dtype=bool)
    m[:n] = make_mask(n, rng)
    return m


def encode_level(items, model):
    """Deterministic code index per tokenized property (no masking)."""
    model.eval()
    out = []
    with torch.no_grad():
        for arr in items:
            classes = torch.from_numpy(np.asarray(arr, dtype=np.int64)).unsqueeze(0)
            pooled = model.encode(classes)
            idx, _ = model.codebook.quantize(pooled)
            out.append(int(idx.item()))
    return out


def masked_top1_accuracy(model, items, rng):
    """Fraction of masked tuple slots predicted exactly (eval mode)."""
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for arr in items:
            classes = torch.from_numpy(np.asarray(arr, dtype=np.int64)).unsqueeze(0)
            mask = torch.from_numpy(make_mask(len(arr), rng)).unsqueeze(0)
            logits, pooled, c_st, _ = model(classes, mask)
            pred = logits.argmax(dim=-1)
            sel = mask.unsqueeze(-1).expand(classes.shape)
            correct += int((pred[sel] == classes[sel]).sum())
            total += int(sel.sum())
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# persistence


def save_vqvae(path, model, extra=None):
    cfg = {
        "level": model.spec.name,
        "k": model.codebook.k,
        "d_model": model.config.d_model,
        "d_ff": model.config.d_ff,
        "heads": model.config.heads,
        "dropout": model.config.dropout,
        "layers": model.config.layers,
    }
    if extra:
        cfg.update(extra)
    hnn.save_checkpoint(path, model, config=cfg)
    usage = model.codebook.usage.numpy()
    sidecar = {
        "level": model.spec.name,
        "k": model.codebook.k,
        "usage_histogram": np.bincount(
            usage.astype(int).clip(0, 10), minlength=11
        ).tolist(),
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)


def load_vqvae(path):
    state, cfg = hnn.load_checkpoint(path)
    config = hnn.BlockConfig(
        d_model=cfg["d_model"],
        d_ff=cfg["d_ff"],
        heads=cfg["heads"],
        dropout=cfg["dropout"],
        layers=cfg["layers"],
    )
    model = VqVae(cfg["level"], k=cfg["k"], config=config)
    model.load_state_dict(state)
    model.eval()
    return model


def cluster_export(items, codes):
    """JSON-lines records {code, member property tokens} for inspection."""
    groups = {}
    for arr, code in zip(items, codes):
        groups.setdefault(code, []).append(np.asarray(arr).tolist())
    return [{"code": code, "members": members} for code, members in sorted(groups.items())]
