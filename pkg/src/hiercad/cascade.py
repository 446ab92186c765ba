"""Two-stage cascaded generation: partial-model encoder, code-tree
generator and model generator, plus the interactive workflows built on
them (unconditional sampling, autocompletion, code-tree editing and
design-preserving regeneration).

Code trees are serialized depth-first: [S, SEP, P, L..., SEP, P, L...,
EOS]. Decoding is grammar-constrained at both stages so sampled
sequences never violate slot levels or the flat token grammar.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import model as cadmodel
from . import nn as hnn
from . import vqvae as vq
from .errors import GenerationError, ValidationError
from .hierarchy import (
    build_skeleton,
    extract_loop_property,
    extract_profile_property,
    extract_solid_property,
)
from .model import (
    BOOL_BASE,
    END_LOOP,
    END_PROFILE,
    END_STEP,
    EOS,
    MAX_CURVES_PER_LOOP,
    MAX_LOOPS_PER_PROFILE,
    MAX_STEPS,
    MAX_TOKENS,
    N_XY,
    PAD,
    SCALAR_BASE,
    SEP_CURVE,
    VOCAB_SIZE,
)

# worst case: solid + 5 steps of (SEP + profile + 20 loops) + EOS = 112
CODE_TREE_MAX_LEN = 128


# ---------------------------------------------------------------------------
# code-tree vocabulary and serialization


@dataclass(frozen=True)
class CodeVocab:
    """Token layout: loop codes, profile codes, solid codes, SEP, EOS."""

    k_loop: int
    k_profile: int
    k_solid: int

    @property
    def sep(self):
        return self.k_loop + self.k_profile + self.k_solid

    @property
    def eos(self):
        return self.sep + 1

    @property
    def size(self):
        return self.eos + 1

    def loop_token(self, i):
        return i

    def profile_token(self, i):
        return self.k_loop + i

    def solid_token(self, i):
        return self.k_loop + self.k_profile + i

    def level_of(self, token):
        if 0 <= token < self.k_loop:
            return "loop"
        if token < self.k_loop + self.k_profile:
            return "profile"
        if token < self.sep:
            return "solid"
        if token == self.sep:
            return "sep"
        if token == self.eos:
            return "eos"
        raise ValidationError(f"token {token} outside code vocabulary", code="code_range")


@dataclass(frozen=True)
class CodeTree:
    """Level-local code indices: one solid, per step (profile, loop list)."""

    solid: int
    steps: tuple  # of (profile_code, tuple of loop codes)

    def __post_init__(self):
        object.__setattr__(
            self, "steps", tuple((p, tuple(ls)) for p, ls in self.steps)
        )
        assert self.steps, "code tree needs at least one profile"
        assert all(ls for _, ls in self.steps), "profiles need at least one loop"


def serialize_code_tree(tree, vocab):
    """DFS token sequence [S, SEP, P, L.., SEP, P, L.., EOS]."""
    out = [vocab.solid_token(tree.solid)]
    for p, loops in tree.steps:
        out.append(vocab.sep)
        out.append(vocab.profile_token(p))
        out.extend(vocab.loop_token(li) for li in loops)
    out.append(vocab.eos)
    return out


def deserialize_code_tree(tokens, vocab):
    """Parse and validate a DFS code-tree token sequence."""
    if not tokens or vocab.level_of(tokens[0]) != "solid":
        raise ValidationError("code tree must start with a solid code", code="code_grammar")
    solid = tokens[0] - vocab.k_loop - vocab.k_profile
    steps = []
    i = 1
    while i < len(tokens) and tokens[i] == vocab.sep:
        i += 1
        if i >= len(tokens) or vocab.level_of(tokens[i]) != "profile":
            raise ValidationError("SEP must be followed by a profile code", code="code_grammar")
        p = tokens[i] - vocab.k_loop
        i += 1
        loops = []
        while i < len(tokens) and vocab.level_of(tokens[i]) == "loop":
            loops.append(tokens[i])
            i += 1
        if not loops:
            raise ValidationError("profile without loop codes", code="code_grammar")
        steps.append((p, tuple(loops)))
    if i != len(tokens) - 1 or tokens[i] != vocab.eos:
        raise ValidationError("code tree must end with EOS", code="code_grammar")
    if not steps:
        raise ValidationError("code tree has no profiles", code="code_grammar")
    return CodeTree(solid, tuple(steps))


def edit_code_tree(tree, slot_path, level, new_code, vocab):
    """Replace one slot's code; the replacement level must match the slot."""
    kind = slot_path[0]
    limits = {"loop": vocab.k_loop, "profile": vocab.k_profile, "solid": vocab.k_solid}
    if level != kind:
        raise ValidationError(
            f"cannot put a {level} code in a {kind} slot", code="level_mismatch"
        )
    if not 0 <= new_code < limits[kind]:
        raise ValidationError(f"{level} code {new_code} out of range", code="code_range")
    if kind == "solid":
        return CodeTree(new_code, tree.steps)
    step_idx = slot_path[1]
    if not 0 <= step_idx < len(tree.steps):
        raise ValidationError(f"step index {step_idx} out of range", code="path_range")
    steps = list(tree.steps)
    p, loops = steps[step_idx]
    if kind == "profile":
        steps[step_idx] = (new_code, loops)
    else:
        loop_idx = slot_path[2]
        if not 0 <= loop_idx < len(loops):
            raise ValidationError(f"loop index {loop_idx} out of range", code="path_range")
        ls = list(loops)
        ls[loop_idx] = new_code
        steps[step_idx] = (p, tuple(ls))
    return CodeTree(tree.solid, tuple(steps))


# ---------------------------------------------------------------------------
# grammar-constrained decoding state machines


class CodeTreeGrammar:
    """Slot-level constraints for code-tree decoding."""

    def __init__(self, vocab):
        self.vocab = vocab
        self.state = "solid"
        self.n_profiles = 0
        self.n_loops = 0

    def allowed(self):
        v = self.vocab
        mask = np.zeros(v.size, dtype=bool)
        if self.state == "solid":
            mask[v.solid_token(0) : v.solid_token(v.k_solid - 1) + 1] = True
        elif self.state == "sep":
            mask[v.sep] = True
        elif self.state == "profile":
            mask[v.profile_token(0) : v.profile_token(v.k_profile - 1) + 1] = True
        elif self.state == "loop_first":
            mask[: v.k_loop] = True
        elif self.state == "loop_more":
            if self.n_loops < MAX_LOOPS_PER_PROFILE:
                mask[: v.k_loop] = True
            if self.n_profiles < MAX_STEPS:
                mask[v.sep] = True
            mask[v.eos] = True
        return mask

    def push(self, token):
        level = self.vocab.level_of(token)
        if level == "solid":
            self.state = "sep"
        elif level == "sep":
            self.state = "profile"
        elif level == "profile":
            self.n_profiles += 1
            self.n_loops = 0
            self.state = "loop_first"
        elif level == "loop":
            self.n_loops += 1
            self.state = "loop_more"
        elif level == "eos":
            self.state = "done"


class CadGrammar:
    """Flat-grammar constraints for model-token decoding.

    Beyond phase structure and caps this tracks point identity, so the
    masks enforce curve chaining (a curve starts at the previous curve's
    end), loop closure (the final point returns to the loop start) and
    the circle rule (a four-point curve must be the sole curve). Every
    masked decode therefore parses, token cap permitting.
    """

    def __init__(self):
        self.phase = "loop_start"
        self.pts = 0
        self.curves = 0
        self.loops = 0
        self.steps = 0
        self.scalars = 0
        self.loop_first = None
        self.prev_end = None
        self.last_xy = None

    def allowed(self):
        mask = np.zeros(VOCAB_SIZE, dtype=bool)
        if self.phase == "loop_start":
            mask[:N_XY] = True
        elif self.phase == "curve":
            first_curve = self.curves == 0
            if self.pts == 0:
                mask[self.prev_end] = True  # chain onto the previous curve
            else:
                max_pts = 4 if first_curve else 3
                if self.pts < max_pts:
                    last_slot = self.pts == max_pts - 1
                    sep_left = self.curves + 1 < MAX_CURVES_PER_LOOP
                    if not first_curve and last_slot and not sep_left:
                        mask[self.loop_first] = True  # must close here
                    else:
                        mask[:N_XY] = True
            if self.pts >= 2:
                is_circle = first_curve and self.pts == 4
                if self.curves + 1 < MAX_CURVES_PER_LOOP and not is_circle:
                    mask[SEP_CURVE] = True
                if is_circle or self.last_xy == self.loop_first:
                    mask[END_LOOP] = True
        elif self.phase == "after_loop":
            if self.loops < MAX_LOOPS_PER_PROFILE:
                mask[:N_XY] = True
            mask[END_PROFILE] = True
        elif self.phase == "scalar":
            mask[SCALAR_BASE : SCALAR_BASE + 64] = True
        elif self.phase == "boolop":
            mask[BOOL_BASE : BOOL_BASE + 3] = True
        elif self.phase == "end_step":
            mask[END_STEP] = True
        elif self.phase == "after_step":
            if self.steps < MAX_STEPS:
                mask[:N_XY] = True
            mask[EOS] = True
        return mask

    def push(self, t):
        if t < N_XY:
            if self.phase in ("loop_start", "after_loop", "after_step"):
                if self.phase == "after_step":
                    self.loops = 0
                self.phase = "curve"
                self.pts = 1
                self.curves = 0
                self.loop_first = t
            else:
                self.pts += 1
            self.last_xy = t
        elif t == SEP_CURVE:
            self.curves += 1
            self.pts = 0
            self.prev_end = self.last_xy
        elif t == END_LOOP:
            self.loops += 1
            self.pts = 0
            self.phase = "after_loop"
        elif t == END_PROFILE:
            self.phase, self.scalars = "scalar", 0
        elif SCALAR_BASE <= t < SCALAR_BASE + 64:
            self.scalars += 1
            if self.scalars == 8:
                self.phase = "boolop"
        elif BOOL_BASE <= t < BOOL_BASE + 3:
            self.phase = "end_step"
        elif t == END_STEP:
            self.steps += 1
            self.phase = "after_step"
        elif t == EOS:
            self.phase = "done"


# ---------------------------------------------------------------------------
# networks


def split_model_tokens(model):
    """(geometry tokens, extrusion tokens) of a CadModel's flat encoding."""
    geo, ext = [], []
    for t in cadmodel.tokenize_model(model):
        if t < N_XY or t in (SEP_CURVE, END_LOOP, END_PROFILE):
            geo.append(t)
        elif SCALAR_BASE <= t < SCALAR_BASE + 64 or BOOL_BASE <= t < BOOL_BASE + 3:
            ext.append(t)
    return geo, ext


class TokenEncoder(nn.Module):
    def __init__(self, config, n_layers, max_len=256):
        super().__init__()
        self.emb = nn.Embedding(VOCAB_SIZE, config.d_model)
        self.pos = nn.Parameter(torch.zeros(max_len, config.d_model))
        self.blocks = nn.ModuleList(
            hnn.SelfAttentionBlock(config) for _ in range(n_layers)
        )

    def forward(self, tokens, valid=None):
        x = self.emb(tokens) + self.pos[: tokens.shape[1]]
        attn = valid.view(valid.shape[0], 1, 1, -1) if valid is not None else None
        for b in self.blocks:
            x = b(x, attn)
        return x


class CadEncoder(nn.Module):
    """Separate geometry and extrusion encoders; outputs concatenated."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or hnn.BlockConfig()
        n = self.config.layers.get("encoder", 6)
        self.geo = TokenEncoder(self.config, n)
        self.ext = TokenEncoder(self.config, n, max_len=64)
        self.apply(hnn.init_weights)
        nn.init.trunc_normal_(self.geo.pos, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.ext.pos, std=0.02, a=-0.04, b=0.04)

    def forward(self, geo_tokens, ext_tokens, geo_valid=None, ext_valid=None):
        parts, masks = [], []
        if geo_tokens.shape[1]:
            parts.append(self.geo(geo_tokens, geo_valid))
            masks.append(
                geo_valid
                if geo_valid is not None
                else torch.ones(geo_tokens.shape, dtype=torch.bool)
            )
        if ext_tokens.shape[1]:
            parts.append(self.ext(ext_tokens, ext_valid))
            masks.append(
                ext_valid
                if ext_valid is not None
                else torch.ones(ext_tokens.shape, dtype=torch.bool)
            )
        if not parts:
            b = geo_tokens.shape[0]
            d = self.config.d_model
            return torch.zeros(b, 0, d), torch.zeros(b, 0, dtype=torch.bool)
        return torch.cat(parts, dim=1), torch.cat(masks, dim=1)

    def encode_model(self, partial):
        """Memory for one partial model (None or empty -> length-0 memory)."""
        if partial is None:
            z = torch.zeros(1, 0, dtype=torch.long)
            return self.forward(z, z)
        geo, ext = split_model_tokens(partial)
        return self.forward(
            torch.tensor([geo], dtype=torch.long), torch.tensor([ext], dtype=torch.long)
        )


class CodeEmbedding(nn.Module):
    """Code index -> vector: frozen codebook rows plus learnable SEP/EOS."""

    def __init__(self, vocab, codebooks, d_model):
        super().__init__()
        self.vocab = vocab
        rows = torch.cat(
            [codebooks["loop"].detach(), codebooks["profile"].detach(), codebooks["solid"].detach()]
        )
        self.register_buffer("code_vectors", rows)
        self.special = nn.Parameter(torch.zeros(2, d_model))  # SEP, EOS
        nn.init.trunc_normal_(self.special, std=0.02, a=-0.04, b=0.04)

    def forward(self, tokens):
        flat = tokens.reshape(-1)
        out = torch.empty(len(flat), self.code_vectors.shape[1])
        is_code = flat < self.vocab.sep
        if is_code.any():
            out[is_code] = self.code_vectors[flat[is_code]]
        if (~is_code).any():
            out[~is_code] = self.special[(flat[~is_code] - self.vocab.sep).clamp(0, 1)]
        return out.view(*tokens.shape, -1)


class ConditionalDecoder(nn.Module):
    """Causal self-attention layers interleaved with cross-attention.

    Cross-attention is skipped entirely for empty memory (the
    unconditional path runs self-attention only).
    """

    def __init__(self, config, n_layers):
        super().__init__()
        self.sa = nn.ModuleList(hnn.SelfAttentionBlock(config) for _ in range(n_layers))
        self.ca = nn.ModuleList(hnn.CrossAttentionBlock(config) for _ in range(n_layers))

    def forward(self, x, memory=None, mem_valid=None):
        t = x.shape[1]
        causal = hnn.causal_mask(t)
        use_mem = memory is not None and memory.shape[1] > 0
        mem_mask = None
        if use_mem and mem_valid is not None:
            mem_mask = mem_valid.view(mem_valid.shape[0], 1, 1, -1)
        for sa, ca in zip(self.sa, self.ca):
            x = sa(x, causal)
            if use_mem:
                x = ca(x, memory, mem_mask)
        return x


class CodeTreeGenerator(nn.Module):
    def __init__(self, vocab, code_embedding, config=None, max_len=CODE_TREE_MAX_LEN):
        super().__init__()
        self.vocab = vocab
        self.config = config or hnn.BlockConfig()
        self.max_len = max_len
        self.code_emb = code_embedding
        self.pos = nn.Parameter(torch.zeros(max_len, self.config.d_model))
        self.decoder = ConditionalDecoder(self.config, self.config.layers.get("decoder", 6))
        self.head = nn.Linear(self.config.d_model, vocab.size)
        self.decoder.apply(hnn.init_weights)
        hnn.init_weights(self.head)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)

    def embed_inputs(self, tokens):
        """Position 0 is a pure positional query; others re-embed codes."""
        b, t = tokens.shape
        start = self.pos[0].expand(b, 1, -1)
        if t == 0:
            return start
        rest = self.code_emb(tokens) + self.pos[1 : t + 1]
        return torch.cat([start, rest], dim=1)

    def forward(self, tokens, memory=None, mem_valid=None):
        """Teacher-forcing logits: position t predicts target token t."""
        x = self.embed_inputs(tokens[:, :-1] if tokens.shape[1] else tokens)
        x = self.decoder(x, memory, mem_valid)
        return self.head(x)


class CadGenerator(nn.Module):
    def __init__(self, config=None, max_len=MAX_TOKENS):
        super().__init__()
        self.config = config or hnn.BlockConfig()
        self.max_len = max_len
        self.emb = nn.Embedding(VOCAB_SIZE, self.config.d_model)
        self.pos = nn.Parameter(torch.zeros(max_len + 1, self.config.d_model))
        self.segment = nn.Parameter(torch.zeros(2, self.config.d_model))
        self.decoder = ConditionalDecoder(self.config, self.config.layers.get("decoder", 6))
        self.head = nn.Linear(self.config.d_model, VOCAB_SIZE)
        self.apply(hnn.init_weights)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.segment, std=0.02, a=-0.04, b=0.04)

    def build_memory(self, enc_memory, enc_valid, code_memory, code_valid):
        """T^E || T^C with a learned segment embedding per source."""
        parts, masks = [], []
        if enc_memory is not None and enc_memory.shape[1]:
            parts.append(enc_memory + self.segment[0])
            masks.append(enc_valid)
        if code_memory is not None and code_memory.shape[1]:
            parts.append(code_memory + self.segment[1])
            masks.append(code_valid)
        if not parts:
            return None, None
        return torch.cat(parts, dim=1), torch.cat(masks, dim=1)

    def embed_inputs(self, tokens):
        b, t = tokens.shape
        start = self.pos[0].expand(b, 1, -1)
        if t == 0:
            return start
        rest = self.emb(tokens) + self.pos[1 : t + 1]
        return torch.cat([start, rest], dim=1)

    def forward(self, tokens, memory=None, mem_valid=None):
        x = self.embed_inputs(tokens[:, :-1] if tokens.shape[1] else tokens)
        x = self.decoder(x, memory, mem_valid)
        return self.head(x)


# ---------------------------------------------------------------------------
# decoding


def _pick(probs, allowed, p, rng):
    probs = probs * allowed
    total = probs.sum()
    if total <= 0:
        # fall back to uniform over allowed (untrained or masked-out model)
        probs = allowed.astype(np.float64)
        total = probs.sum()
    probs = probs / total
    if p is None:
        return int(probs.argmax())
    return hnn.nucleus_sample(probs, p, rng)


def decode_tokens(step_logits_fn, grammar_factory, n, p, rng, max_len, end_token):
    """Batched grammar-constrained autoregressive decoding.

    ``step_logits_fn(tokens)`` maps the (n, t) prefix batch to next-token
    logits (n, V). Returns a list of n token lists (without the end
    token) and a list of flags for sequences that hit max_len.
    """
    grammars = [grammar_factory() for _ in range(n)]
    buf = torch.zeros(n, max_len, dtype=torch.long)
    lengths = [0] * n
    done = [False] * n
    for t in range(max_len):
        if all(done):
            break
        with torch.no_grad():
            logits = step_logits_fn(buf[:, :t])[:, -1]
            probs = torch.softmax(logits.double(), dim=-1).numpy()
        for i in range(n):
            if done[i]:
                continue
            tok = _pick(probs[i], grammars[i].allowed(), p, rng)
            if tok == end_token:
                done[i] = True
            else:
                buf[i, t] = tok
                lengths[i] = t + 1
                grammars[i].push(tok)
    seqs = [buf[i, : lengths[i]].tolist() for i in range(n)]
    return seqs, [not d for d in done]


# ---------------------------------------------------------------------------
# the assembled system


class Cascade:
    """Trained components plus the workflows that combine them."""

    def __init__(self, vqvaes, config=None):
        self.config = config or hnn.BlockConfig()
        self.vqvaes = vqvaes
        self.vocab = CodeVocab(
            vqvaes["loop"].codebook.k,
            vqvaes["profile"].codebook.k,
            vqvaes["solid"].codebook.k,
        )
        for m in vqvaes.values():
            assert m.codebook.vectors.shape[1] == self.config.d_model, (
                "codebook width must match the generator width"
            )
        codebooks = {lv: m.codebook.vectors for lv, m in vqvaes.items()}
        self.code_emb = CodeEmbedding(self.vocab, codebooks, self.config.d_model)
        self.encoder = CadEncoder(self.config)
        self.g_code = CodeTreeGenerator(self.vocab, self.code_emb, self.config)
        self.g_cad = CadGenerator(self.config)

    def modules(self):
        return {
            "encoder": self.encoder,
            "g_code": self.g_code,
            "g_cad": self.g_cad,
        }

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def parameters(self):
        seen = set()
        for m in self.modules().values():
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    yield p

    # -- ground-truth code trees ------------------------------------------

    def code_tree_for(self, model):
        """Encode a model's properties through the level VQ-VAEs."""
        solid_arr = vq.tokenize_level(extract_solid_property(model))
        s_code = vq.encode_level([solid_arr], self.vqvaes["solid"])[0]
        steps = []
        for step in model.steps:
            p_arr = vq.tokenize_level(extract_profile_property(step.loops))
            p_code = vq.encode_level([p_arr], self.vqvaes["profile"])[0]
            l_codes = vq.encode_level(
                [vq.tokenize_level(extract_loop_property(lp)) for lp in step.loops],
                self.vqvaes["loop"],
            )
            steps.append((p_code, tuple(l_codes)))
        tree = CodeTree(s_code, tuple(steps))
        assert build_skeleton(model).loops_per_step == tuple(
            len(ls) for _, ls in tree.steps
        )
        return tree

    # -- generation workflows ----------------------------------------------

    def encode_partial(self, partial):
        return self.encoder.encode_model(partial)

    def generate_code_trees(self, memory, mem_valid, n, p, rng):
        """Sample n grammar-valid code trees; p=None decodes greedily."""
        if memory.shape[1]:
            memory = memory.expand(n, -1, -1)
            mem_valid = mem_valid.expand(n, -1)

        def step_fn(tokens):
            return self.g_code(
                torch.cat([tokens, torch.zeros(n, 1, dtype=torch.long)], dim=1),
                memory if memory.shape[1] else None,
                mem_valid if memory.shape[1] else None,
            )

        seqs, overflow = decode_tokens(
            step_fn,
            lambda: CodeTreeGrammar(self.vocab),
            n,
            p,
            rng,
            self.g_code.max_len - 1,
            self.vocab.eos,
        )
        if any(overflow):
            raise GenerationError("code tree exceeded length limit")
        return [deserialize_code_tree(s + [self.vocab.eos], self.vocab) for s in seqs]

    def code_memory(self, trees):
        """Embedded code tokens (with positions) for a batch of trees."""
        toks = [serialize_code_tree(t, self.vocab) for t in trees]
        tmax = max(len(t) for t in toks)
        batch = torch.full((len(toks), tmax), self.vocab.eos, dtype=torch.long)
        valid = torch.zeros(len(toks), tmax, dtype=torch.bool)
        for i, t in enumerate(toks):
            batch[i, : len(t)] = torch.tensor(t)
            valid[i, : len(t)] = True
        emb = self.code_emb(batch) + self.g_code.pos[1 : tmax + 1]
        return emb, valid

    def generate_models(self, memory, mem_valid, trees, p, rng):
        """Decode token sequences conditioned on memory and code trees.

        Returns (token lists, overflow flags); callers parse and count
        failures.
        """
        n = len(trees)
        code_mem, code_valid = self.code_memory(trees)
        if memory.shape[1]:
            memory = memory.expand(n, -1, -1)
            mem_valid = mem_valid.expand(n, -1)
        else:
            memory = torch.zeros(n, 0, self.config.d_model)
            mem_valid = torch.zeros(n, 0, dtype=torch.bool)
        full_mem, full_valid = self.g_cad.build_memory(
            memory, mem_valid, code_mem, code_valid
        )

        def step_fn(tokens):
            return self.g_cad(
                torch.cat([tokens, torch.zeros(n, 1, dtype=torch.long)], dim=1),
                full_mem,
                full_valid,
            )

        seqs, overflow = decode_tokens(
            step_fn, CadGrammar, n, p, rng, self.g_cad.max_len - 1, EOS
        )
        return [s + [EOS] for s in seqs], overflow

    def sample_unconditional(self, n, p, rng):
        """Empty-memory pipeline: sample code trees, then decode models."""
        empty_mem = torch.zeros(1, 0, self.config.d_model)
        empty_valid = torch.zeros(1, 0, dtype=torch.bool)
        trees = self.generate_code_trees(empty_mem, empty_valid, n, p, rng)
        seqs, overflow = self.generate_models(empty_mem, empty_valid, trees, p, rng)
        return seqs, trees, overflow

    def autocomplete(self, partial, n_variants, p_code, rng):
        """Code diversity only: nucleus-sampled trees, greedy model decode."""
        if n_variants == 0:
            return [], [], 0
        memory, mem_valid = self.encode_partial(partial)
        trees = self.generate_code_trees(memory, mem_valid, n_variants, p_code, rng)
        seqs, overflow = self.generate_models(memory, mem_valid, trees, None, rng)
        models, kept_trees, dropped = [], [], 0
        for s, t, ov in zip(seqs, trees, overflow):
            if ov:
                dropped += 1
                continue
            try:
                models.append(cadmodel.detokenize_model(s))
                kept_trees.append(t)
            except Exception:
                dropped += 1
        return models, kept_trees, dropped

    def regenerate_with_codes(self, edited_partial, tree, rng=None):
        """Greedy decode conditioned on the edited partial and prior codes."""
        memory, mem_valid = self.encode_partial(edited_partial)
        seqs, overflow = self.generate_models(
            memory, mem_valid, [tree], None, rng or np.random.default_rng(0)
        )
        if overflow[0]:
            raise GenerationError("model decode exceeded token cap")
        return cadmodel.detokenize_model(seqs[0])


def code_tree_to_json(tree):
    return {
        "solid": tree.solid,
        "steps": [{"profile": p, "loops": list(ls)} for p, ls in tree.steps],
    }


def code_tree_from_json(doc):
    try:
        return CodeTree(
            int(doc["solid"]),
            tuple(
                (int(s["profile"]), tuple(int(l) for l in s["loops"]))
                for s in doc["steps"]
            ),
        )
    except (KeyError, TypeError, AssertionError) as e:
        raise ValidationError(f"malformed code tree document: {e}", code="code_grammar")


def save_cascade(dirpath, cascade):
    """Write the three VQ-VAEs and the generator stack to a directory."""
    import dataclasses
    import os

    os.makedirs(dirpath, exist_ok=True)
    for lv, m in cascade.vqvaes.items():
        vq.save_vqvae(os.path.join(dirpath, f"vqvae_{lv}.ckpt"), m)
    cfg = dataclasses.asdict(cascade.config)
    for name, mod in cascade.modules().items():
        hnn.save_checkpoint(os.path.join(dirpath, f"{name}.ckpt"), mod, config=cfg)


def load_cascade(dirpath):
    import os

    vqvaes = {
        lv: vq.load_vqvae(os.path.join(dirpath, f"vqvae_{lv}.ckpt"))
        for lv in ("loop", "profile", "solid")
    }
    _, cfg = hnn.load_checkpoint(os.path.join(dirpath, "encoder.ckpt"))
    cascade = Cascade(vqvaes, config=hnn.BlockConfig(**cfg))
    for name, mod in cascade.modules().items():
        hnn.load_checkpoint(os.path.join(dirpath, f"{name}.ckpt"), mod)
    return cascade.eval()


def sample_partial(model, rng):
    """Training-time conditioning input: empty, or a prefix of the model.

    With probability 1/3 returns None (unconditional mix); otherwise keeps
    a random step prefix and optionally drops a loop suffix of the last
    kept step.
    """
    if rng.random() < 1.0 / 3.0:
        return None
    n_keep = int(rng.integers(1, len(model.steps) + 1))
    steps = list(model.steps[:n_keep])
    last = steps[-1]
    n_loops = int(rng.integers(1, len(last.loops) + 1))
    steps[-1] = cadmodel.ExtrudeStep(
        last.loops[:n_loops], last.plane, last.distance, last.op
    )
    return cadmodel.CadModel(tuple(steps))


# ---------------------------------------------------------------------------
# training


def _pad_token_batch(seqs, pad_value):
    tmax = max(len(s) for s in seqs)
    out = torch.full((len(seqs), tmax), pad_value, dtype=torch.long)
    valid = torch.zeros(len(seqs), tmax, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        valid[i, : len(s)] = True
    return out, valid


def train_cascade(
    models,
    vqvaes,
    steps=1500,
    batch_size=16,
    seed=0,
    lr=0.001,
    warmup=500,
    config=None,
    log_every=None,
):
    """Stage 2: freeze codebooks, teacher-force encoder + G_code + G_cad."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cascade = Cascade(vqvaes, config=config)
    for m in cascade.modules().values():
        m.train()
    targets_code = []
    targets_cad = []
    for mod in models:
        tree = cascade.code_tree_for(mod)
        targets_code.append(serialize_code_tree(tree, cascade.vocab))
        targets_cad.append(cadmodel.tokenize_model(mod))
    opt = hnn.WarmupAdamW(list(cascade.parameters()), lr=lr, warmup=warmup)
    history = []
    for step in range(1, steps + 1):
        pick = rng.integers(0, len(models), size=min(batch_size, len(models)))
        loss = torch.zeros(())
        # group by partial to batch the two decoders over a shared memory
        geo_seqs, ext_seqs = [], []
        for i in pick:
            partial = sample_partial(models[i], rng)
            if partial is None:
                geo_seqs.append([])
                ext_seqs.append([])
            else:
                geo, ext = split_model_tokens(partial)
                geo_seqs.append(geo)
                ext_seqs.append(ext)
        geo_b, geo_v = _pad_token_batch(geo_seqs, PAD)
        ext_b, ext_v = _pad_token_batch(ext_seqs, PAD)
        memory, mem_valid = cascade.encoder(geo_b, ext_b, geo_v, ext_v)
        # zero out fully-empty rows via the validity mask
        code_b, code_v = _pad_token_batch(
            [targets_code[i] for i in pick], cascade.vocab.eos
        )
        code_logits = cascade.g_code(code_b, memory, mem_valid)
        loss_code = nn.functional.cross_entropy(
            code_logits.reshape(-1, cascade.vocab.size),
            torch.where(code_v, code_b, torch.full_like(code_b, -100)).reshape(-1),
            ignore_index=-100,
        )
        trees = [deserialize_code_tree(targets_code[i], cascade.vocab) for i in pick]
        code_mem, code_valid = cascade.code_memory(trees)
        full_mem, full_valid = cascade.g_cad.build_memory(
            memory, mem_valid, code_mem, code_valid
        )
        cad_b, cad_v = _pad_token_batch([targets_cad[i] for i in pick], PAD)
        cad_logits = cascade.g_cad(cad_b, full_mem, full_valid)
        loss_cad = nn.functional.cross_entropy(
            cad_logits.reshape(-1, VOCAB_SIZE),
            torch.where(cad_v, cad_b, torch.full_like(cad_b, -100)).reshape(-1),
            ignore_index=-100,
        )
        loss = loss_code + loss_cad
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        if log_every and step % log_every == 0:
            print(f"[cascade] step {step} loss {history[-1]:.4f}")
    cascade.eval()
    return cascade, history
