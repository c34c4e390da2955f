"""Finite-difference verification of every differentiable op and of the generator->classifier path."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nets import build_classifier, build_generator, classifier_config, generator_config
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    name: str
    shape: tuple
    seed: int
    error: float
    tolerance: float = TOLERANCE
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" (kink-skipped coords: {self.skipped})" if self.skipped else ""
        return f"{status} {self.name:<17} seed={self.seed} shape={self.shape} max_rel_err={self.error:.2e}{extra}"


def check_op(fn, inputs, seed: int = 0, coords_per_input: int | None = None) -> float:
    """Max relative error over all inputs of ``sum(fn(*inputs) * R)`` for a random ``R``."""
    rng = np.random.default_rng(seed + 1000)
    out = fn(*inputs)
    weight = Tensor(rng.normal(size=out.shape)) if out.data.size > 1 else None

    def loss():
        o = fn(*inputs)
        return o if weight is None else (o * weight).sum()

    for t in inputs:
        t.grad = None
    T.backward(loss())
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        coords = None
        if coords_per_input is not None and t.data.size > coords_per_input:
            coords = rng.choice(t.data.size, size=coords_per_input, replace=False)
        with T.no_grad():
            num = T.numerical_grad(lambda: loss().item(), t.data, STEP, coords)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, T.max_relative_error(analytic, num))
    return worst


def _p(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        x = np.where(np.abs(x) < low, np.sign(x + 1e-300) * (low + rng.random(shape)), x)
    return Tensor(x, requires_grad=True)


def op_cases(seed: int):
    """(name, shape, fn, inputs) for every differentiable op at three shapes."""
    rng = np.random.default_rng(seed)
    cases = []
    for xs, ws, pad, stride in (((2, 3, 8, 8), (4, 3, 3, 3), 1, 1), ((1, 2, 5, 7), (3, 2, 3, 3), 0, 1),
                                ((2, 2, 7, 7), (2, 2, 3, 3), 0, 2), ((1, 1, 6, 6), (2, 1, 5, 5), 2, 1)):
        ins = [_p(rng, *xs), _p(rng, *ws), _p(rng, ws[0])]
        cases.append(("conv2d", xs, lambda x, w, b, p=pad, s=stride: T.conv2d(x, w, b, p, s), ins))
    for xs in ((1, 2, 4, 4), (2, 3, 6, 6), (1, 1, 8, 4)):
        cases.append(("max_pool2d", xs, lambda x: T.max_pool2d(x, 2), [_p(rng, *xs)]))
    for xs in ((1, 2, 3, 3), (2, 1, 4, 5), (1, 3, 2, 2)):
        cases.append(("upsample_nearest2", xs, T.upsample_nearest2, [_p(rng, *xs)]))
    for a, b in (((1, 1, 2, 2), (1, 1, 2, 2)), ((2, 3, 4, 4), (2, 2, 4, 4)), ((1, 2, 3, 5), (1, 1, 3, 5))):
        cases.append(("concat_channels", a, T.concat_channels, [_p(rng, *a), _p(rng, *b)]))
    for xs in ((4, 3, 5, 5), (2, 2, 3, 3), (3, 4, 4, 2)):
        st = T.BatchNormState(xs[1])
        ins = [_p(rng, *xs), _p(rng, xs[1]), _p(rng, xs[1])]
        cases.append(("batch_norm2d", xs, lambda x, g, b, st=st: T.batch_norm2d(x, g, b, st, update_stats=False), ins))
        st_eval = T.BatchNormState(xs[1])
        st_eval.running_mean = rng.normal(size=xs[1])
        st_eval.running_var = rng.uniform(0.5, 2.0, size=xs[1])
        ins = [_p(rng, *xs), _p(rng, xs[1]), _p(rng, xs[1])]
        cases.append(("batch_norm2d_eval", xs, lambda x, g, b, st=st_eval: T.batch_norm2d(x, g, b, st, training=False), ins))
    for xs in ((3,), (2, 3, 4), (1, 2, 5, 5)):
        cases.append(("leaky_relu", xs, lambda x: T.leaky_relu(x, 0.2), [_p(rng, *xs, low=0.1)]))
    for xs in ((3,), (2, 3, 4), (1, 2, 5, 5)):
        cases.append(("sigmoid", xs, T.sigmoid, [_p(rng, *xs)]))
    for xs in ((4,), (2, 1, 3, 3), (1, 1, 6, 5)):
        target = (rng.random(xs) < 0.4).astype(float)
        pred = Tensor(rng.uniform(0.05, 0.95, size=xs), requires_grad=True)
        cases.append(("bce_loss", xs, lambda p, t=target: T.bce_loss(p, t), [pred]))
    for xs in ((3,), (2, 1, 4, 4), (1, 2, 3, 5)):
        cases.append(("l2_loss", xs, T.l2_loss, [_p(rng, *xs), _p(rng, *xs)]))
    return cases


COMPOSITE_SHAPES = ((2, 1, 16, 16), (2, 1, 8, 8), (3, 1, 12, 12))


def composite_case(seed: int, shape, lambda_seg: float = 1.0, base_filters: int = 2):
    """Generator -> classifier loss on a 2-level U-Net pair; returns (loss fn, G parameters)."""
    rng = np.random.default_rng(seed)
    G = build_generator(generator_config(depth=2, base_filters=base_filters), seed)
    C = build_classifier(classifier_config(2, depth=2, base_filters=base_filters), seed + 100)
    C.requires_grad_(False)
    xa = rng.normal(size=shape)
    xb = rng.normal(size=shape)
    y = (rng.random(shape) < 0.3).astype(float)

    def loss():
        g = G.forward(xa, update_stats=False)
        seg = T.bce_loss(C.forward(T.concat_channels(Tensor(xa), g), update_stats=False), y)
        return T.l2_loss(g, xb) + seg * lambda_seg

    return loss, G.parameters()


def _branches(loss):
    with T.branch_trace() as trace:
        loss()
    return trace


def check_composite(seed: int, shape, coords: int = 12) -> tuple[float, int]:
    """Worst per-array relative error over sampled coordinates of every G parameter.

    A coordinate whose +-h evaluations change any branch decision (a LeakyReLU
    or max-pool kink inside the stencil) is not differentiable at that scale
    and is replaced by another draw. Arrays whose true gradient vanishes (conv
    biases feeding batch norm) are scaled by 1e-3 of the largest gradient seen
    anywhere instead of their own. Returns ``(error, skipped coordinates)``.
    """
    loss, params = composite_case(seed, shape)
    for p in params:
        p.grad = None
    T.backward(loss())
    rng = np.random.default_rng(seed + 7)
    pairs, skipped = [], 0
    with T.no_grad():
        base = _branches(loss)
        for p in params:
            flat, picked = p.data.reshape(-1), []
            for i in rng.permutation(flat.size):
                if len(picked) == coords:
                    break
                orig = flat[i]
                smooth = True
                for delta in (STEP, -STEP):
                    flat[i] = orig + delta
                    smooth = smooth and _branches(loss) == base
                flat[i] = orig
                if smooth:
                    picked.append(i)
                else:
                    skipped += 1
            num = T.numerical_grad(lambda: loss().item(), p.data, STEP, picked)
            pairs.append((p.grad.reshape(-1)[picked], num.reshape(-1)[picked]))
    pairs = [(a, n) for a, n in pairs if a.size]
    floor = 1e-3 * max(max(np.abs(a).max(), np.abs(n).max()) for a, n in pairs)
    worst = 0.0
    for a, n in pairs:
        scale = max(np.abs(a).max(), np.abs(n).max(), floor)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst, skipped


def run_suite(seeds=SEEDS, verbose: bool = False) -> list[CheckResult]:
    results = []
    start = time.perf_counter()
    for seed in seeds:
        for name, shape, fn, ins in op_cases(seed):
            results.append(CheckResult(name, shape, seed, check_op(fn, ins, seed)))
            if verbose:
                print(results[-1].line(), flush=True)
        for shape in COMPOSITE_SHAPES:
            err, skipped = check_composite(seed, shape)
            results.append(CheckResult("G->C composite", shape, seed, err, skipped=skipped))
            if verbose:
                print(results[-1].line(), flush=True)
    if verbose:
        print(f"{sum(r.passed for r in results)}/{len(results)} checks passed "
              f"in {time.perf_counter() - start:.1f}s")
    return results
