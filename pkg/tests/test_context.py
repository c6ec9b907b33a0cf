import numpy as np
import pytest

from ctxtrack import autograd as ag
from ctxtrack import ssm
from ctxtrack.autograd import Tensor
from ctxtrack.context import (ContextMamba, ContextToken, absorb_frame, emit_summary, project_frame, reset,
                              state_from_arrays, state_to_arrays, update_context_token)
from ctxtrack.nn import Linear
from ctxtrack.selftest import streaming_suite


def params(d=3, n=2, seed=0):
    return ssm.SsmParams(d, n, np.random.default_rng(seed))


class TestProjectFrame:
    def test_identity(self):
        f = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(project_frame(Tensor(f), np.eye(4)).data, f)

    def test_zero(self):
        lin = Linear(4, 3, np.random.default_rng(0), bias=False)
        assert not project_frame(Tensor(np.zeros((6, 4))), lin).data.any()

    def test_tokenwise_order(self):
        rng = np.random.default_rng(1)
        f, W = rng.normal(size=(7, 4)), rng.normal(size=(4, 3))
        out = project_frame(Tensor(f), W).data
        assert out.shape == (7, 3)
        np.testing.assert_allclose(out[3], f[3] @ W)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            project_frame(Tensor(np.zeros((0, 4))), np.eye(4))


class TestAbsorbEmit:
    def test_zero_tokens_keep_zero_state(self):
        st, _ = reset(0, 3, 2)
        st = absorb_frame(st, Tensor(np.zeros((4, 3))), params())
        assert not st.carried.h.data.any()
        assert st.frame_index == 0 and st.pending

    def test_associativity(self):
        rng = np.random.default_rng(2)
        p = params(seed=2)
        t1, t2 = rng.normal(size=(3, 3)), rng.normal(size=(4, 3))
        st, _ = reset(0, 3, 2)
        once = absorb_frame(st, Tensor(np.vstack([t1, t2])), p)
        twice = absorb_frame(absorb_frame(st, Tensor(t1), p), Tensor(t2), p)
        np.testing.assert_allclose(once.carried.h.data, twice.carried.h.data, atol=1e-12, rtol=0)

    def test_order_sensitivity(self):
        rng = np.random.default_rng(3)
        p = params(seed=3)
        f1, f2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        st, _ = reset(0, 3, 2)
        a = absorb_frame(absorb_frame(st, Tensor(f1), p), Tensor(f2), p)
        b = absorb_frame(absorb_frame(st, Tensor(f2), p), Tensor(f1), p)
        assert np.max(np.abs(a.carried.h.data - b.carried.h.data)) > 1e-6

    def test_empty_frame_rejected(self):
        st, _ = reset(0, 3, 2)
        with pytest.raises(ValueError):
            absorb_frame(st, Tensor(np.zeros((0, 3))), params())

    def test_zero_state_zero_empty(self):
        st, _ = reset(0, 3, 2)
        st = absorb_frame(st, Tensor(np.zeros((2, 3))), params())
        y, _ = emit_summary(st, Tensor(np.zeros(3)), params())
        assert not y.data.any()

    def test_scalar_hand_step(self):
        # a_bar = b_bar = 0.5 with delta = ln 2, A = -1 and B chosen so phi*delta*B = 0.5
        p = ssm.SsmParams(1, 1, np.random.default_rng(0))
        p.a_log.data[:] = 0.0
        p.delta_proj.weight.data[:] = 0.0
        p.delta_proj.bias.data[:] = np.log(np.expm1(np.log(2.0)))  # softplus^-1(ln 2)
        phi = np.expm1(-np.log(2.0)) / -np.log(2.0)
        b_val = 0.5 / (phi * np.log(2.0))
        p.bc_proj.weight.data[:] = [[b_val, 1.0]]  # token value 1 -> B = b_val, C = 1
        st, _ = reset(0, 1, 1)
        st.carried.h.data[:] = 0.875
        st.pending = True
        y, st2 = emit_summary(st, Tensor(np.ones(1)), p)
        assert st2.carried.h.item() == pytest.approx(0.9375, abs=1e-12)
        assert y.item() == pytest.approx(0.9375, abs=1e-12)

    def test_counter(self):
        p = params()
        st, _ = reset(0, 3, 2)
        for k in range(4):
            st = absorb_frame(st, Tensor(np.ones((2, 3))), p)
            assert st.frame_index == k
            _, st = emit_summary(st, Tensor(np.ones(3)), p)
            assert st.frame_index == k + 1

    def test_emit_after_reset_rejected(self):
        st, _ = reset(0, 3, 2)
        with pytest.raises(RuntimeError):
            emit_summary(st, Tensor(np.zeros(3)), params())

    def test_emit_twice_rejected(self):
        p = params()
        st, _ = reset(0, 3, 2)
        st = absorb_frame(st, Tensor(np.ones((2, 3))), p)
        _, st = emit_summary(st, Tensor(np.zeros(3)), p)
        with pytest.raises(RuntimeError):
            emit_summary(st, Tensor(np.zeros(3)), p)


class TestUpdateToken:
    def test_zero_summary(self):
        out = Linear(4, 6, np.random.default_rng(0))
        out.bias.data[:] = 0.0
        c = update_context_token(None, Tensor(np.zeros(4)), out, 1)
        assert c.tokens.shape == (1, 6) and not c.tokens.data.any()

    def test_replacement(self):
        rng = np.random.default_rng(1)
        out = Linear(4, 6, rng)
        y1, y2 = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        first = update_context_token(None, y1, out, 2)
        second = update_context_token(first, y2, out, 2)
        fresh = update_context_token(None, y2, out, 2)
        np.testing.assert_array_equal(second.tokens.data, fresh.tokens.data)
        assert second.tokens.shape == (2, 3)

    def test_single_token(self):
        tap = ContextMamba(8, 4, 3, 1, np.random.default_rng(0))
        c, _ = tap.step(tap.fresh_state(), Tensor(np.ones((5, 8))))
        assert c.length == 1 and c.tokens.shape == (1, 8)


class TestReset:
    def test_fresh(self):
        init = Tensor(np.arange(4.0).reshape(1, 4))
        st, c = reset(2, 3, 5, init)
        assert st.frame_index == 0 and st.layer_id == 2
        assert not st.carried.h.data.any()
        np.testing.assert_array_equal(c.tokens.data, init.data)

    def test_idempotent(self):
        a, _ = reset(1, 3, 2)
        b, _ = reset(1, 3, 2)
        np.testing.assert_array_equal(a.carried.h.data, b.carried.h.data)
        assert (a.frame_index, a.layer_id, a.pending) == (b.frame_index, b.layer_id, b.pending)


class TestStreaming:
    def test_equals_interleaved_single_scan(self):
        res = streaming_suite(n=50)
        assert res.passed, res.line()

    def test_summary_depends_on_first_frame(self):
        rng = np.random.default_rng(4)
        tap = ContextMamba(6, 4, 3, 1, rng)
        frames = [rng.normal(size=(4, 6)) for _ in range(3)]

        def run(fs):
            st = tap.fresh_state()
            for f in fs:
                c, st = tap.step(st, Tensor(f))
            return c.tokens.data

        base = run(frames)
        bumped = [frames[0] + 0.1] + frames[1:]
        assert np.max(np.abs(run(bumped) - base)) > 1e-8

    def test_gradient_flows_to_first_frame(self):
        rng = np.random.default_rng(5)
        tap = ContextMamba(6, 4, 3, 1, rng)
        f1 = ag.parameter(rng.normal(size=(4, 6)))
        rest = [Tensor(rng.normal(size=(4, 6))) for _ in range(2)]
        w = rng.normal(size=(1, 6))

        def loss_at_frame3():
            st = tap.fresh_state()
            c, st = tap.step(st, f1)
            for f in rest:
                c, st = tap.step(st, f)
            return (c.tokens * w).sum()

        g = ag.backward(loss_at_frame3(), [f1])[f1]
        assert np.abs(g).max() > 0
        assert ag.grad_check_many(loss_at_frame3, [f1]) < 1e-4

    def test_batched_step_matches_single(self):
        rng = np.random.default_rng(6)
        tap = ContextMamba(6, 4, 3, 2, rng)
        xs = rng.normal(size=(3, 5, 6))
        cb, sb = tap.step(tap.fresh_state(3), Tensor(xs))
        for i in range(3):
            c, s = tap.step(tap.fresh_state(), Tensor(xs[i]))
            np.testing.assert_allclose(cb.tokens.data[i], c.tokens.data, atol=1e-14)


class TestWindowed:
    def test_window_forgets_old_frames(self):
        rng = np.random.default_rng(7)
        tap = ContextMamba(6, 4, 3, 1, rng, window=2)
        frames = [rng.normal(size=(3, 6)) for _ in range(4)]

        def run(fs):
            st = tap.fresh_state()
            for f in fs:
                c, st = tap.step(st, Tensor(f))
            return c.tokens.data, st

        a, st = run(frames)
        b, _ = run([frames[0] + 5.0] + frames[1:])
        np.testing.assert_array_equal(a, b)
        assert st.frame_index == 4 and len(st.window) == 1

    def test_window_equals_fresh_scan_of_recent_frames(self):
        rng = np.random.default_rng(8)
        tap = ContextMamba(6, 4, 3, 1, rng, window=3)
        unbounded = ContextMamba(6, 4, 3, 1, np.random.default_rng(8))
        frames = [rng.normal(size=(3, 6)) for _ in range(5)]
        st = tap.fresh_state()
        for f in frames:
            c, st = tap.step(st, Tensor(f))
        st2 = unbounded.fresh_state()
        for f in frames[-3:]:
            c2, st2 = unbounded.step(st2, Tensor(f))
        np.testing.assert_allclose(c.tokens.data, c2.tokens.data, atol=1e-14)


def test_snapshot_round_trip():
    rng = np.random.default_rng(9)
    tap = ContextMamba(6, 4, 3, 1, rng, window=3)
    st = tap.fresh_state()
    for _ in range(4):
        _, st = tap.step(st, Tensor(rng.normal(size=(3, 6))))
    back = state_from_arrays(state_to_arrays(st, "x/"), "x/")
    np.testing.assert_array_equal(back.carried.h.data, st.carried.h.data)
    assert back.frame_index == st.frame_index and back.layer_id == st.layer_id
    assert len(back.window) == len(st.window)
    f = Tensor(rng.normal(size=(3, 6)))
    np.testing.assert_array_equal(tap.step(back, f)[0].tokens.data, tap.step(st, f)[0].tokens.data)
