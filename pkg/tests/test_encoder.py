import numpy as np
import pytest

from ctxtrack import autograd as ag
from ctxtrack.autograd import Tensor
from ctxtrack.config import ModelConfig
from ctxtrack.encoder import ContextEncoder, PatchMerge, TokenizedFrame, downsample_stage, patchify
from ctxtrack.head import CenterHead, total_loss

TINY = dict(search_size=32, template_size=16, stage_dims=(4, 4), d_enc=8, depth=2, heads=2, mlp_ratio=2,
            insertion_layers=(1, 2), d_scan=4, d_state=2, head_hidden=4)


@pytest.fixture(scope="module")
def enc():
    return ContextEncoder(ModelConfig(), np.random.default_rng(0))


def inputs(enc, rng, b=1):
    s = enc.tokenize(rng.uniform(size=(b, 3, 64, 64)), "search")
    t = enc.tokenize(rng.uniform(size=(b, 3, 32, 32)), "template")
    return enc.initial_context(b), s, t


class TestPatchEmbed:
    def test_token_count(self, enc):
        out = enc.patch_embed(np.zeros((1, 3, 64, 64)))
        assert out.shape == (1, 256, 16)

    def test_zero_image_zero_table(self):
        e = ContextEncoder(ModelConfig(), np.random.default_rng(1))
        e.pos_search_patch.data[:] = 0.0
        assert not e.patch_embed(np.zeros((1, 3, 64, 64))).data.any()

    def test_locality(self, enc):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(1, 3, 64, 64))
        b = a.copy()
        b[0, :, 8:12, 20:24] += 0.5  # patch row 2, column 5
        diff = np.abs(enc.patch_embed(a).data - enc.patch_embed(b).data).sum(-1)[0]
        assert set(np.flatnonzero(diff)) == {2 * 16 + 5}

    def test_indivisible_rejected(self, enc):
        with pytest.raises(ValueError, match="16"):
            enc.patch_embed(np.zeros((1, 3, 60, 64)))

    def test_patchify_layout(self):
        img = np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8)
        p = patchify(img, 4)
        assert p.shape == (2, 4, 48)
        np.testing.assert_array_equal(p[1, 3].reshape(3, 4, 4), img[1, :, 4:, 4:])


class TestDownsample:
    def test_one_stage(self):
        merge = PatchMerge(4, 8, np.random.default_rng(0))
        out, grid = downsample_stage(Tensor(np.random.default_rng(1).normal(size=(1, 256, 4))), (16, 16), merge)
        assert out.shape == (1, 64, 8) and grid == (8, 8)

    def test_two_stages_total_stride(self, enc):
        toks = enc.tokenize(np.zeros((1, 3, 64, 64)), "search").tokens
        assert toks.shape[1] == 64 ** 2 // 16 ** 2 == 16

    def test_constant_grid_stays_constant(self):
        merge = PatchMerge(3, 5, np.random.default_rng(2))
        x = np.tile(np.array([0.3, -1.0, 2.0]), (1, 16, 1))
        out, _ = downsample_stage(Tensor(x), (4, 4), merge)
        np.testing.assert_allclose(out.data, np.broadcast_to(out.data[:, :1], out.shape), atol=1e-14)

    def test_odd_grid_rejected(self):
        merge = PatchMerge(2, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="even"):
            downsample_stage(Tensor(np.zeros((1, 9, 2))), (3, 3), merge)


class TestEncode:
    def test_no_taps_context_unchanged(self):
        e = ContextEncoder(ModelConfig(insertion_layers=()), np.random.default_rng(0))
        c, s, t = inputs(e, np.random.default_rng(1))
        _, c2, states = e.encode(c, s, t)
        np.testing.assert_array_equal(c2.tokens.data, c.tokens.data)
        assert states == []

    def test_sequence_length(self, enc):
        c, s, t = inputs(enc, np.random.default_rng(3))
        enc.encode(c, s, t, record=True)
        assert enc._attention[1].shape[-1] == 1 + 16 + 4 == 21

    def test_permutation_equivariance(self):
        e = ContextEncoder(ModelConfig(insertion_layers=()), np.random.default_rng(4))
        e.pos_search.data[:] = 0.0
        rng = np.random.default_rng(5)
        c, _, t = inputs(e, rng)
        s = Tensor(rng.normal(size=(1, 16, 64)))
        perm = rng.permutation(16)
        f1, _, _ = e.encode(c, TokenizedFrame(s, "search"), t)
        f2, _, _ = e.encode(c, TokenizedFrame(Tensor(s.data[:, perm]), "search"), t)
        np.testing.assert_allclose(f2.data, f1.data[:, perm], atol=1e-12)

    def test_segment_named_on_mismatch(self, enc):
        c, s, t = inputs(enc, np.random.default_rng(6))
        bad = TokenizedFrame(Tensor(np.zeros((1, 5, 64))), "template")
        with pytest.raises(ag.ShapeError, match="template"):
            enc.encode(c, s, bad)

    def test_pure_without_taps(self):
        e = ContextEncoder(ModelConfig(insertion_layers=()), np.random.default_rng(7))
        c, s, t = inputs(e, np.random.default_rng(8))
        a = e.encode(c, s, t)[0].data
        b = e.encode(c, s, t)[0].data
        np.testing.assert_array_equal(a, b)

    def test_states_advance(self, enc):
        c, s, t = inputs(enc, np.random.default_rng(9), b=2)
        states = enc.fresh_states(2)
        for k in range(3):
            _, c, states = enc.encode(c, s, t, states)
        assert [st.frame_index for st in states] == [3, 3, 3]
        assert [st.layer_id for st in states] == [3, 6, 9]

    def test_full_pipeline_gradient(self):
        cfg = ModelConfig(**TINY)
        rng = np.random.default_rng(10)
        e = ContextEncoder(cfg, rng)
        head = CenterHead(cfg.d_enc, cfg.head_hidden, rng)
        search = [rng.uniform(size=(1, 3, 32, 32)) for _ in range(2)]
        tmpl = rng.uniform(size=(1, 3, 16, 16))
        gt = np.array([[0.4, 0.6, 0.3, 0.25]])

        def loss():
            t = e.tokenize(tmpl, "template")
            c, states = e.initial_context(1), e.fresh_states(1)
            total = None
            for img in search:
                f, c, states = e.encode(c, e.tokenize(img, "search"), t, states)
                term = total_loss(head(f), gt)[0]
                total = term if total is None else total + term
            return total

        tensors = [p for blk in e.blocks for p in blk.parameters()] + \
                  [p for tap in e.taps for p in tap.parameters()] + [e.context_init, e.pos_context]
        assert ag.grad_check_many(loss, tensors, 1e-5) < 1e-4


class TestAttentionDump:
    def test_rows_sum_to_one(self, enc):
        c, s, t = inputs(enc, np.random.default_rng(11))
        enc.encode(c, s, t, record=True)
        for k in range(1, 10):
            w = enc.attention_weights_dump(k)
            assert w.shape == (1, 1, 16)
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_uniform_keys(self):
        e = ContextEncoder(ModelConfig(), np.random.default_rng(12))
        e.pos_search.data[:] = 0.0
        c, _, t = inputs(e, np.random.default_rng(13))
        s = TokenizedFrame(Tensor(np.tile(np.random.default_rng(14).normal(size=64), (1, 16, 1))), "search")
        e.encode(c, s, t, record=True)
        np.testing.assert_allclose(e.attention_weights_dump(1), 1 / 16, atol=1e-12)

    def test_requires_recording(self):
        e = ContextEncoder(ModelConfig(), np.random.default_rng(15))
        c, s, t = inputs(e, np.random.default_rng(16))
        e.encode(c, s, t, record=False)
        with pytest.raises(RuntimeError):
            e.attention_weights_dump(1)


class TestConfig:
    def test_token_counts(self):
        cfg = ModelConfig()
        assert (cfg.n_search, cfg.n_template, cfg.grid) == (16, 4, 4)

    @pytest.mark.parametrize("layers", [(0, 3), (3, 10), (6, 3), (3, 3)])
    def test_bad_insertion_layers(self, layers):
        with pytest.raises(ValueError):
            ModelConfig(insertion_layers=layers)

    def test_size_multiple(self):
        with pytest.raises(ValueError):
            ModelConfig(search_size=72)
