import numpy as np
import pytest
import torch

from hiercad import cascade as cs
from hiercad import model as cm
from hiercad import nn as hnn
from hiercad import synth
from hiercad import vqvae as vq
from hiercad.errors import ValidationError


def small_config():
    return hnn.BlockConfig(
        d_model=32, d_ff=64, heads=4, dropout=0.0,
        layers={"vqvae": 2, "encoder": 2, "decoder": 2},
    )


def small_vqvaes(k=8):
    torch.manual_seed(0)
    cfg = small_config()
    return {lv: vq.VqVae(lv, k=k, config=cfg).eval() for lv in ("loop", "profile", "solid")}


@pytest.fixture(scope="module")
def cascade():
    torch.manual_seed(1)
    return cs.Cascade(small_vqvaes(), config=small_config()).eval()


def square_model():
    return cm.CadModel([cm.ExtrudeStep([synth.rect_loop(0, 0, 63, 63)])])


class TestCodeVocab:
    def test_layout(self):
        v = cs.CodeVocab(10, 20, 30)
        assert v.sep == 60 and v.eos == 61 and v.size == 62
        assert v.loop_token(3) == 3
        assert v.profile_token(0) == 10
        assert v.solid_token(29) == 59

    def test_level_of(self):
        v = cs.CodeVocab(2, 2, 2)
        assert [v.level_of(t) for t in range(8)] == [
            "loop", "loop", "profile", "profile", "solid", "solid", "sep", "eos",
        ]
        with pytest.raises(ValidationError):
            v.level_of(8)


class TestSerialization:
    def test_two_profile_dfs_pattern(self):
        # [S, SEP, P, L, L, SEP, P, L, L, L, L, EOS]
        v = cs.CodeVocab(10, 10, 10)
        tree = cs.CodeTree(5, (((3, (0, 1))), (7, (2, 4, 6, 8))))
        toks = cs.serialize_code_tree(tree, v)
        levels = [v.level_of(t) for t in toks]
        assert levels == [
            "solid", "sep", "profile", "loop", "loop",
            "sep", "profile", "loop", "loop", "loop", "loop", "eos",
        ]
        assert cs.deserialize_code_tree(toks, v) == tree

    def test_round_trip_random(self):
        v = cs.CodeVocab(50, 30, 20)
        rng = np.random.default_rng(2)
        for _ in range(100):
            steps = tuple(
                (
                    int(rng.integers(0, 30)),
                    tuple(int(rng.integers(0, 50)) for _ in range(rng.integers(1, 6))),
                )
                for _ in range(rng.integers(1, 5))
            )
            tree = cs.CodeTree(int(rng.integers(0, 20)), steps)
            toks = cs.serialize_code_tree(tree, v)
            assert cs.deserialize_code_tree(toks, v) == tree

    @pytest.mark.parametrize(
        "tokens",
        [
            [],
            [0, 6, 2, 0, 7],       # starts with a loop code
            [4, 6, 6, 2, 0, 7],    # SEP followed by SEP
            [4, 6, 2, 7],          # profile with no loops
            [4, 7],                # no profiles at all
            [4, 6, 2, 0],          # missing EOS
            [4, 6, 2, 0, 7, 0],    # trailing tokens after EOS
        ],
    )
    def test_malformed_rejected(self, tokens):
        v = cs.CodeVocab(2, 2, 2)
        with pytest.raises(ValidationError):
            cs.deserialize_code_tree(tokens, v)


class TestEdit:
    def setup_method(self):
        self.v = cs.CodeVocab(10, 10, 10)
        self.tree = cs.CodeTree(1, ((2, (3, 4)), (5, (6,))))

    def test_replace_each_level(self):
        t = cs.edit_code_tree(self.tree, ("solid",), "solid", 9, self.v)
        assert t.solid == 9 and t.steps == self.tree.steps
        t = cs.edit_code_tree(self.tree, ("profile", 1), "profile", 0, self.v)
        assert t.steps[1][0] == 0 and t.steps[0] == self.tree.steps[0]
        t = cs.edit_code_tree(self.tree, ("loop", 0, 1), "loop", 7, self.v)
        assert t.steps[0][1] == (3, 7)

    def test_level_mismatch_rejected(self):
        with pytest.raises(ValidationError) as e:
            cs.edit_code_tree(self.tree, ("loop", 0, 0), "profile", 1, self.v)
        assert e.value.code == "level_mismatch"

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            cs.edit_code_tree(self.tree, ("solid",), "solid", 10, self.v)
        with pytest.raises(ValidationError):
            cs.edit_code_tree(self.tree, ("profile", 5), "profile", 0, self.v)
        with pytest.raises(ValidationError):
            cs.edit_code_tree(self.tree, ("loop", 0, 9), "loop", 0, self.v)


class TestCodeTreeGrammar:
    def test_random_walks_always_valid(self):
        v = cs.CodeVocab(5, 5, 5)
        rng = np.random.default_rng(3)
        for _ in range(200):
            g = cs.CodeTreeGrammar(v)
            toks = []
            while g.state != "done" and len(toks) < 130:
                allowed = np.flatnonzero(g.allowed())
                t = int(rng.choice(allowed))
                g.push(t)
                toks.append(t)
            tree = cs.deserialize_code_tree(toks, v)
            assert len(tree.steps) <= cm.MAX_STEPS
            assert all(len(ls) <= cm.MAX_LOOPS_PER_PROFILE for _, ls in tree.steps)

    def test_caps_enforced_in_masks(self):
        v = cs.CodeVocab(3, 3, 3)
        g = cs.CodeTreeGrammar(v)
        g.push(v.solid_token(0))
        for _ in range(cm.MAX_STEPS):
            g.push(v.sep)
            g.push(v.profile_token(0))
            g.push(v.loop_token(0))
        assert not g.allowed()[v.sep]  # sixth profile forbidden
        for _ in range(cm.MAX_LOOPS_PER_PROFILE - 1):
            g.push(v.loop_token(0))
        assert not g.allowed()[: v.k_loop].any()  # 21st loop forbidden
        assert g.allowed()[v.eos]


class TestCadGrammar:
    @staticmethod
    def _pick_token(g, rng):
        # choose a category first so structural tokens stay likely, and
        # bias toward closing the loop so walks terminate
        mask = g.allowed()
        cats = []
        xy = np.flatnonzero(mask[: cm.N_XY])
        if len(xy):
            cats.append("xy")
        if mask[cm.SCALAR_BASE : cm.SCALAR_BASE + 64].any():
            cats.append("scalar")
        for t in (cm.SEP_CURVE, cm.END_LOOP, cm.END_PROFILE, cm.END_STEP, cm.EOS):
            if mask[t]:
                cats.append(t)
        if mask[cm.BOOL_BASE : cm.BOOL_BASE + 3].any():
            cats.append("bool")
        cat = cats[rng.integers(0, len(cats))]
        if cat == "xy":
            if g.loop_first is not None and mask[g.loop_first] and rng.random() < 0.5:
                return g.loop_first
            return int(rng.choice(xy))
        if cat == "scalar":
            return cm.SCALAR_BASE + int(rng.integers(0, 64))
        if cat == "bool":
            return cm.BOOL_BASE + int(rng.integers(0, 3))
        return cat

    def test_random_walks_detokenize(self):
        rng = np.random.default_rng(4)
        ok = 0
        for _ in range(50):
            g = cs.CadGrammar()
            toks = []
            while g.phase != "done" and len(toks) < cm.MAX_TOKENS:
                t = self._pick_token(g, rng)
                g.push(t)
                toks.append(t)
            if g.phase != "done":
                continue
            model = cm.detokenize_model(toks)
            cm.check_caps(model)
            ok += 1
        assert ok >= 40  # a few walks may overrun the token cap

    def test_square_tokens_accepted(self):
        g = cs.CadGrammar()
        for t in cm.tokenize_model(square_model()):
            assert g.allowed()[t], f"token {t} rejected"
            g.push(t)
        assert g.phase == "done"

    def test_closure_required_for_end_loop(self):
        g = cs.CadGrammar()
        g.push(0)
        g.push(100)
        assert not g.allowed()[cm.END_LOOP]  # open: 100 != 0
        g.push(0)
        assert g.allowed()[cm.END_LOOP]

    def test_chained_curve_starts_at_previous_end(self):
        g = cs.CadGrammar()
        for t in [0, 100, cm.SEP_CURVE]:
            g.push(t)
        mask = g.allowed()
        assert mask[100] and mask[: cm.N_XY].sum() == 1

    def test_circle_must_be_alone(self):
        g = cs.CadGrammar()
        for t in [7, 8, 9, 10]:
            g.push(t)
        mask = g.allowed()
        assert mask[cm.END_LOOP] and not mask[cm.SEP_CURVE]
        assert not mask[: cm.N_XY].any()

    def test_scalar_phase_exactly_eight(self):
        g = cs.CadGrammar()
        for t in [0, 100, 0, cm.END_LOOP, cm.END_PROFILE]:
            g.push(t)
        for i in range(8):
            assert g.allowed()[cm.SCALAR_BASE]
            assert not g.allowed()[cm.BOOL_BASE]
            g.push(cm.SCALAR_BASE + i)
        assert not g.allowed()[cm.SCALAR_BASE]
        assert g.allowed()[cm.BOOL_BASE : cm.BOOL_BASE + 3].all()


class TestSplitTokens:
    def test_square_partition(self):
        geo, ext = cs.split_model_tokens(square_model())
        # 8 XY + 3 SEP_CURVE + END_LOOP + END_PROFILE
        assert len(geo) == 13
        # 8 scalars + boolop
        assert len(ext) == 9
        assert all(t < cm.N_XY or t in (cm.SEP_CURVE, cm.END_LOOP, cm.END_PROFILE) for t in geo)
        assert all(
            cm.SCALAR_BASE <= t < cm.SCALAR_BASE + 64 or cm.BOOL_BASE <= t < cm.BOOL_BASE + 3
            for t in ext
        )


class TestSamplePartial:
    def test_mix_and_prefix_property(self):
        rng = np.random.default_rng(5)
        model = synth.random_model(rng, max_steps=3)
        while len(model.steps) < 2:
            model = synth.random_model(rng, max_steps=3)
        empties = 0
        for _ in range(200):
            part = cs.sample_partial(model, rng)
            if part is None:
                empties += 1
                continue
            n = len(part.steps)
            assert part.steps[: n - 1] == model.steps[: n - 1]
            last = part.steps[-1]
            src = model.steps[n - 1]
            assert last.loops == src.loops[: len(last.loops)]
            assert (last.plane, last.distance, last.op) == (src.plane, src.distance, src.op)
        assert 40 <= empties <= 95  # about a third


class TestEncoder:
    def test_empty_partial_zero_length_memory(self, cascade):
        mem, valid = cascade.encode_partial(None)
        assert mem.shape == (1, 0, 32) and valid.shape == (1, 0)

    def test_memory_length_matches_token_split(self, cascade):
        model = square_model()
        mem, valid = cascade.encode_partial(model)
        geo, ext = cs.split_model_tokens(model)
        assert mem.shape == (1, len(geo) + len(ext), 32)
        assert valid.all()

    def test_mixed_batch_with_empty_row_is_finite(self, cascade):
        geo, ext = cs.split_model_tokens(square_model())
        geo_b = torch.full((2, len(geo)), cm.PAD, dtype=torch.long)
        ext_b = torch.full((2, len(ext)), cm.PAD, dtype=torch.long)
        geo_b[0] = torch.tensor(geo)
        ext_b[0] = torch.tensor(ext)
        geo_v = torch.zeros(2, len(geo), dtype=torch.bool)
        ext_v = torch.zeros(2, len(ext), dtype=torch.bool)
        geo_v[0] = True
        ext_v[0] = True
        mem, valid = cascade.encoder(geo_b, ext_b, geo_v, ext_v)
        assert torch.isfinite(mem).all()
        tokens = torch.tensor([[0, 1], [2, 3]])
        logits = cascade.g_code(tokens, mem, valid)
        assert torch.isfinite(logits).all()


class TestCodeTreeFor:
    def test_shape_matches_model(self, cascade):
        rng = np.random.default_rng(6)
        for _ in range(5):
            model = synth.random_model(rng)
            tree = cascade.code_tree_for(model)
            assert len(tree.steps) == len(model.steps)
            for (_, loops), step in zip(tree.steps, model.steps):
                assert len(loops) == len(step.loops)
            assert 0 <= tree.solid < cascade.vocab.k_solid

    def test_deterministic(self, cascade):
        model = synth.random_model(np.random.default_rng(7))
        assert cascade.code_tree_for(model) == cascade.code_tree_for(model)


class TestUntrainedGeneration:
    def test_code_trees_grammar_valid(self, cascade):
        rng = np.random.default_rng(8)
        mem = torch.zeros(1, 0, 32)
        valid = torch.zeros(1, 0, dtype=torch.bool)
        trees = cascade.generate_code_trees(mem, valid, 25, 0.9, rng)
        assert len(trees) == 25
        for t in trees:
            toks = cs.serialize_code_tree(t, cascade.vocab)
            assert cs.deserialize_code_tree(toks, cascade.vocab) == t

    def test_models_parse_or_overflow(self, cascade):
        rng = np.random.default_rng(9)
        mem = torch.zeros(1, 0, 32)
        valid = torch.zeros(1, 0, dtype=torch.bool)
        trees = cascade.generate_code_trees(mem, valid, 4, 0.9, rng)
        seqs, overflow = cascade.generate_models(mem, valid, trees, 0.9, rng)
        for s, ov in zip(seqs, overflow):
            if not ov:
                cm.detokenize_model(s)

    def test_greedy_is_deterministic(self, cascade):
        mem, valid = cascade.encode_partial(square_model())
        t1 = cascade.generate_code_trees(mem, valid, 2, None, np.random.default_rng(0))
        t2 = cascade.generate_code_trees(mem, valid, 2, None, np.random.default_rng(1))
        assert t1 == t2 and t1[0] == t1[1]


@pytest.fixture(scope="module")
def overfit():
    torch.manual_seed(10)
    models = [
        square_model(),
        cm.CadModel([cm.ExtrudeStep([synth.rect_loop(8, 8, 40, 40)], distance=20)]),
    ]
    trained, history = cs.train_cascade(
        models,
        small_vqvaes(),
        steps=800,
        batch_size=4,
        seed=11,
        warmup=50,
        config=small_config(),
    )
    return trained, models, history


class TestOverfit:
    def test_two_model_reproduction(self, overfit):
        trained, models, _ = overfit
        for m in models:
            tree = trained.code_tree_for(m)
            out = trained.regenerate_with_codes(m, tree)
            assert cm.tokenize_model(out) == cm.tokenize_model(m)

    def test_loss_decreases_smoothed(self, overfit):
        _, _, history = overfit
        smooth = np.convolve(history, np.ones(10) / 10, mode="valid")
        assert smooth[-1] < 0.2 * smooth[0]

    def test_codes_steer_generation(self, overfit):
        # next-token distributions under two different code trees must
        # diverge somewhere, or the codes would carry no information
        trained, models, _ = overfit
        base = trained.code_tree_for(models[0])
        alt_code = (base.steps[0][1][0] + 1) % trained.vocab.k_loop
        trees = [base, cs.edit_code_tree(base, ("loop", 0, 0), "loop", alt_code, trained.vocab)]
        tokens = torch.tensor([cm.tokenize_model(models[0])])
        mem = torch.zeros(1, 0, 32)
        valid = torch.zeros(1, 0, dtype=torch.bool)
        kls = []
        for tree in trees:
            code_mem, code_valid = trained.code_memory([tree])
            full_mem, full_valid = trained.g_cad.build_memory(
                mem, valid, code_mem, code_valid
            )
            with torch.no_grad():
                kls.append(torch.log_softmax(trained.g_cad(tokens, full_mem, full_valid), -1))
        p = kls[0].exp()
        kl = (p * (kls[0] - kls[1])).sum(-1)
        assert kl.max().item() > 1e-4
