"""Randomised self-check suites shared by the CLI and the test-suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import ssm
from .context import ContextMamba, absorb_frame, emit_summary, reset
from .head import BBox, CenterHead, giou, iou_giou, total_loss
from .nn import Block


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    counterexample: int | None
    seconds: float
    cases: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = "" if self.counterexample is None else f" counterexample seed={self.counterexample}"
        return (f"{status} {self.name}: {self.cases} cases, worst={self.worst:.3e} "
                f"(tol {self.tolerance:.0e}), {self.seconds:.2f}s{extra}")


def _random_scan_case(seed: int, t_max: int = 32, d_max: int = 4, n_max: int = 4):
    rng = np.random.default_rng(seed)
    T, D, N = int(rng.integers(1, t_max + 1)), int(rng.integers(1, d_max + 1)), int(rng.integers(1, n_max + 1))
    x = rng.normal(size=(T, D))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), (T, D)))
    A = -np.exp(rng.uniform(-1.0, 1.5, (D, N)))
    B = rng.normal(size=(T, N))
    C = rng.normal(size=(T, N))
    h0 = rng.normal(size=(D, N))
    return x, delta, A, B, C, h0


def oracle_suite(n: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Fused scan against the closed-form oracle, plus the scalar ZOH case."""
    t0 = time.perf_counter()
    worst, bad = 0.0, None
    for i in range(n):
        case_seed = seed * 100_000 + i
        x, delta, A, B, C, h0 = _random_scan_case(case_seed)
        y, _ = ssm.selective_scan(x, delta, A, B, C, h0)
        a_bars, b_bars = ssm.zoh_reference(delta, A, B)
        ref = ssm.scan_oracle(a_bars, b_bars, C, x, h0)
        err = float(np.max(np.abs(y.data - ref)))
        if err > worst:
            worst = err
        if err > tol and bad is None:
            bad = case_seed
    a_bar, b_bar = ssm.discretize(np.array([[-1.0]]), np.array([1.0]), np.array([np.log(2.0)]))
    zoh_err = max(abs(a_bar.item() - 0.5), abs(b_bar.item() - 0.5))
    passed = worst <= tol and zoh_err <= 1e-12
    if zoh_err > 1e-12 and bad is None:
        bad = -1
    return SuiteResult("oracle", passed, max(worst, zoh_err), tol, bad, time.perf_counter() - t0, n + 1)


def streaming_case(seed: int, k_max: int = 8):
    """Returns (frame-by-frame, single-shot) summaries and final states for one instance."""
    rng = np.random.default_rng(seed)
    D, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k = int(rng.integers(1, k_max + 1))
    params = ssm.SsmParams(D, N, rng)
    empty = ag.Tensor(rng.normal(size=D))
    frames = [ag.Tensor(rng.normal(size=(int(rng.integers(1, 6)), D))) for _ in range(k)]
    st, _ = reset(0, D, N)
    summaries = []
    for f in frames:
        st = absorb_frame(st, f, params)
        y, st = emit_summary(st, empty, params)
        summaries.append(y.data)
    seq = np.concatenate([np.vstack([f.data, empty.data[None]]) for f in frames])
    y_all, h_all = ssm.scan(params, ag.Tensor(seq))
    marks = np.cumsum([f.shape[0] + 1 for f in frames]) - 1
    return np.array(summaries), y_all.data[marks], st.carried.h.data, h_all.h.data, st.frame_index, k


def streaming_suite(n: int = 50, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Frame-by-frame absorb/emit against one scan over the interleaved tokens."""
    t0 = time.perf_counter()
    worst, bad = 0.0, None
    for i in range(n):
        case_seed = seed * 100_000 + i
        ys, ys_ref, h, h_ref, count, k = streaming_case(case_seed)
        err = max(float(np.max(np.abs(ys - ys_ref))), float(np.max(np.abs(h - h_ref))))
        if count != k:
            err = float("inf")
        worst = max(worst, err)
        if err > tol and bad is None:
            bad = case_seed
    return SuiteResult("streaming", worst <= tol, worst, tol, bad, time.perf_counter() - t0, n)


def _leaves(module) -> list:
    return module.parameters()


def gradcheck_cases(seed: int = 0):
    """(name, loss closure, tensors) for the scan, a 3-frame context pipeline,
    an attention block and the tracking loss."""
    rng = np.random.default_rng(seed)
    cases = []

    T, D, N = 5, 3, 2
    x = ag.parameter(rng.normal(size=(T, D)))
    delta = ag.parameter(np.exp(rng.uniform(-3, 0, (T, D))))
    A = ag.parameter(-np.exp(rng.uniform(-1, 1, (D, N))))
    B = ag.parameter(rng.normal(size=(T, N)))
    C = ag.parameter(rng.normal(size=(T, N)))
    h0 = ag.parameter(rng.normal(size=(D, N)))
    wy, wh = rng.normal(size=(T, D)), rng.normal(size=(D, N))

    def scan_loss():
        y, h = ssm.selective_scan(x, delta, A, B, C, h0)
        return (y * wy).sum() + (h * wh).sum()

    cases.append(("scan", scan_loss, [x, delta, A, B, C, h0]))

    tap = ContextMamba(6, 4, 3, 2, rng)
    frames = [ag.parameter(rng.normal(size=(1, 4, 6))) for _ in range(3)]
    wc = rng.normal(size=(3, 1, 2, 6))

    def context_loss():
        st = tap.fresh_state(1)
        total = None
        for i, f in enumerate(frames):
            c_p, st = tap.step(st, f)
            term = (c_p.tokens * wc[i]).sum()
            total = term if total is None else total + term
        return total

    cases.append(("context_pipeline", context_loss, _leaves(tap) + frames))

    blk = Block(8, 2, 2, rng)
    xb = ag.parameter(rng.normal(size=(1, 5, 8)))
    wb = rng.normal(size=(1, 5, 8))
    cases.append(("encoder_block", lambda: (blk(xb) * wb).sum(), _leaves(blk) + [xb]))

    head = CenterHead(4, 4, rng)
    f = ag.parameter(rng.normal(size=(2, 16, 4)))
    gt = np.array([[0.41, 0.62, 0.3, 0.2], [0.7, 0.3, 0.15, 0.35]])
    cases.append(("total_loss", lambda: total_loss(head(f), gt)[0], _leaves(head) + [f]))
    return cases


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> SuiteResult:
    t0 = time.perf_counter()
    worst, bad_name = 0.0, None
    names = []
    for name, fn, tensors in gradcheck_cases(seed):
        err = ag.grad_check_many(fn, tensors, eps)
        names.append(name)
        if err > worst:
            worst = err
        if err > tol and bad_name is None:
            bad_name = name
    return SuiteResult("gradcheck", worst <= tol, worst, tol, None if bad_name is None else seed,
                       time.perf_counter() - t0, len(names))


def giou_suite(n: int = 10_000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    b = BBox(0.4, 0.5, 0.3, 0.2)
    worst = abs(giou(b, b) - 1.0)
    touch = giou(BBox.from_corners(0.0, 0.0, 0.5, 0.5), BBox.from_corners(0.5, 0.5, 1.0, 1.0))
    worst = max(worst, abs(touch + 0.5))
    p = rng.uniform(0, 1, (n, 4))
    q = rng.uniform(0, 1, (n, 4))
    a = np.concatenate([p[:, :2], 1e-3 + p[:, 2:]], axis=1)
    c = np.concatenate([q[:, :2], 1e-3 + q[:, 2:]], axis=1)
    iou, g = iou_giou(a, c)
    viol = g - iou
    bad = seed if viol.max() > 0 else None
    passed = worst == 0.0 and touch == -0.5 and viol.max() <= 0 and bool(np.all(g >= -1))
    return SuiteResult("giou", passed, max(worst, float(max(viol.max(), 0.0))), 0.0, bad,
                       time.perf_counter() - t0, n + 2)


SUITES = {"oracle": oracle_suite, "streaming": streaming_suite, "gradcheck": gradcheck_suite,
          "giou": giou_suite}


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [fn(seed=seed) for fn in SUITES.values()]
