"""Self-check suites run by ``ibnseg verify`` and by the acceptance tests.

Each suite returns a list of :class:`CaseResult`; a suite passes when every
case does.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .divergence import ChannelStats, kl_gaussian, layer_divergence, sym_kl
from .losses import LossConfig, bce_loss, dice_loss, hybrid_loss, lovasz_extension_oracle, lovasz_hinge
from .nn import (NormParams, ParamScope, SwitchableWeights, batch_norm, bottleneck_block, build_toynet,
                 instance_norm, layer_norm, switchable_norm)
from .training import OptimConfig, lr_at

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-9
MATH_TOL = 1e-12


@dataclass
class CaseResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# ------------------------------------------------------------------ gradcheck


def _weighted(out: ad.Var, w: np.ndarray) -> ad.Var:
    # a random projection keeps every input's gradient O(1)
    return ad.sum(out * w)


def _generic(rng: np.random.Generator, shape, low=-2.0, high=2.0, gap=1e-3) -> np.ndarray:
    """Uniform draw rejecting values near 0 (relu kink) and near-ties."""
    while True:
        x = rng.uniform(low, high, size=shape)
        flat = np.sort(x.reshape(-1))
        if np.all(np.abs(x) > gap) and (flat.size < 2 or np.min(np.diff(flat)) > gap / 10):
            return x


def _binary_targets(rng, shape) -> np.ndarray:
    y = (rng.uniform(size=shape) < 0.4).astype(float)
    y.reshape(shape[0] * shape[1], -1)[:, 0] = 1.0  # every task has a positive
    return y


def _lovasz_generic(rng, shape, y) -> np.ndarray:
    # margins 1 - s * sign must avoid 0 and ties
    while True:
        s = _generic(rng, shape)
        m = 1.0 - s * np.where(y > 0, 1.0, -1.0)
        flat = np.sort(m.reshape(-1))
        if np.all(np.abs(m) > 1e-3) and np.min(np.diff(flat)) > 1e-4:
            return s


def gradcheck_cases(seed: int = 0, repeats: int = 10) -> list[tuple[str, Callable, np.ndarray]]:
    """(name, f, x) triples; ``f`` maps a Var to a scalar Var."""
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, f, x):
        cases.append((name, f, x))

    for r in range(repeats):
        tag = f"#{r}"
        s = (2, 3, 3)
        w = rng.normal(size=s)
        b = _generic(rng, s)
        add(f"add{tag}", lambda v, b=b, w=w: _weighted(v + b, w), _generic(rng, s))
        add(f"sub{tag}", lambda v, b=b, w=w: _weighted(b - v, w), _generic(rng, s))
        add(f"mul{tag}", lambda v, b=b, w=w: _weighted(v * b, w), _generic(rng, s))
        add(f"div{tag}", lambda v, b=b, w=w: _weighted(b / v, w), _generic(rng, s, 0.5, 2.0))
        add(f"scalar-ops{tag}", lambda v, w=w: _weighted((v * 3.0 - 1.5) / 2.0, w), _generic(rng, s))
        add(f"neg{tag}", lambda v, w=w: _weighted(-v, w), _generic(rng, s))
        add(f"log{tag}", lambda v, w=w: _weighted(ad.log(v), w), _generic(rng, s, 0.2, 2.0))
        add(f"exp{tag}", lambda v, w=w: _weighted(ad.exp(v), w), _generic(rng, s))
        add(f"relu{tag}", lambda v, w=w: _weighted(ad.relu(v) * v, w), _generic(rng, s))
        add(f"sigmoid{tag}", lambda v, w=w: _weighted(ad.sigmoid(v), w), _generic(rng, s))
        add(f"softplus{tag}", lambda v, w=w: _weighted(ad.softplus(v), w), _generic(rng, s))
        add(f"sqrt{tag}", lambda v, w=w: _weighted(ad.sqrt(v), w), _generic(rng, s, 0.2, 2.0))
        add(f"sum-axes{tag}", lambda v, w=w: _weighted(ad.sum(v * v, axes=1), w[:, 0]), _generic(rng, s))
        add(f"mean-keep{tag}", lambda v, w=w: _weighted(ad.expand(ad.mean(v * v, axes=(1, 2), keep=True), s), w),
            _generic(rng, s))
        add(f"reshape-transpose{tag}",
            lambda v, w=w: _weighted(ad.transpose(ad.reshape(v * v, (3, 2, 3)), (1, 0, 2)), w.reshape(2, 3, 3)),
            _generic(rng, s))
        add(f"slice-concat{tag}",
            lambda v, w=w: _weighted(ad.concat([ad.slice_axis(v, 1, 1, 3) * 2.0, ad.slice_axis(v * v, 1, 0, 1)], 1), w),
            _generic(rng, s))
        xs = (2, 3, 5, 5)
        ker = rng.normal(size=(4, 3, 3, 3))
        wo = rng.normal(size=(2, 4, 3, 3))
        add(f"conv2d-input{tag}", lambda v, k=ker, wo=wo: _weighted(ad.conv2d(v, k, stride=2, padding=1), wo),
            _generic(rng, xs))
        xin = rng.normal(size=xs)
        add(f"conv2d-weight{tag}", lambda v, x=xin, wo=wo: _weighted(ad.conv2d(x, v, stride=2, padding=1), wo),
            _generic(rng, (4, 3, 3, 3)))
        wp = rng.normal(size=(2, 4, 5, 5))
        kp = rng.normal(size=(4, 3, 1, 1))
        add(f"conv2d-pointwise-bias{tag}",
            lambda v, x=xin, k=kp, wp=wp: _weighted(ad.conv2d(x, k, v), wp), _generic(rng, (4,)))
        wr = rng.normal(size=(2, 3, 7, 9))
        add(f"resize-bilinear{tag}", lambda v, wr=wr: _weighted(ad.resize_bilinear(v, (7, 9)), wr),
            _generic(rng, (2, 3, 4, 5)))
        wn = rng.normal(size=(2, 3, 4, 4))
        xn = rng.normal(size=(2, 3, 4, 4))
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.normal(size=3)
        plain = lambda g=gamma, bt=beta: NormParams(g, bt, None, None)  # noqa: E731
        add(f"batch-norm-input{tag}", lambda v, wn=wn: _weighted(batch_norm(v, plain(), "train"), wn),
            _generic(rng, (2, 3, 4, 4)))
        add(f"batch-norm-gamma{tag}",
            lambda v, x=xn, bt=beta, wn=wn: _weighted(batch_norm(x, NormParams(v, bt), "train"), wn),
            gamma.copy())
        add(f"instance-norm-input{tag}", lambda v, wn=wn: _weighted(instance_norm(v, plain()), wn),
            _generic(rng, (2, 3, 4, 4)))
        add(f"instance-norm-beta{tag}",
            lambda v, x=xn, g=gamma, wn=wn: _weighted(instance_norm(x, NormParams(g, v)), wn), beta.copy())
        add(f"layer-norm-input{tag}", lambda v, wn=wn: _weighted(layer_norm(v, plain()), wn),
            _generic(rng, (2, 3, 4, 4)))
        ml, vl = rng.normal(size=3), rng.normal(size=3)
        branches = ("IN", "LN", "BN") if r % 2 == 0 else ("IN", "BN")
        sw = lambda m=ml, vv=vl, br=branches: SwitchableWeights(m, vv, br)  # noqa: E731
        add(f"switchable-norm-input-{'+'.join(branches)}{tag}",
            lambda v, wn=wn, sw=sw: _weighted(switchable_norm(v, plain(), sw(), "train"), wn),
            _generic(rng, (2, 3, 4, 4)))
        add(f"switchable-norm-mean-logits{tag}",
            lambda v, x=xn, vv=vl, br=branches, wn=wn: _weighted(
                switchable_norm(x, plain(), SwitchableWeights(v, vv, br), "train"), wn), ml.copy())
        add(f"switchable-norm-var-logits{tag}",
            lambda v, x=xn, m=ml, br=branches, wn=wn: _weighted(
                switchable_norm(x, plain(), SwitchableWeights(m, v, br), "train"), wn), vl.copy())
        policy = ("PLAIN_BN", "IBN_A", "IBN_S", "IBN_B")[r % 4]
        net = build_toynet(policy, (4, 6), 2, seed=seed + r)
        for table in (net.params,):
            for k in table:
                if k.endswith((".gamma", ".beta", "_logits")):
                    table[k] = table[k] + rng.normal(scale=0.2, size=table[k].shape)
        wb = rng.normal(size=(2, 6, 3, 3))

        def block(v, net=net, wb=wb):
            scope = ParamScope(net, None)
            h = bottleneck_block(v, scope, 1, "train")
            return _weighted(h, wb)

        add(f"bottleneck-{policy}{tag}", block, _generic(rng, (2, 4, 5, 5), 0.05, 2.0))
        ls = (2, 2, 3, 3)
        y = _binary_targets(rng, ls)
        add(f"bce{tag}", lambda v, y=y: bce_loss(v, y), _generic(rng, ls))
        add(f"dice{tag}", lambda v, y=y: dice_loss(v, y), _generic(rng, ls))
        add(f"lovasz-per-image{tag}", lambda v, y=y: lovasz_hinge(v, y, True), _lovasz_generic(rng, ls, y))
        add(f"lovasz-batch{tag}", lambda v, y=y: lovasz_hinge(v, y, False), _lovasz_generic(rng, ls, y))
        lam = (float(rng.uniform(0, 2)), float(rng.uniform(0, 2)))
        add(f"hybrid{tag}", lambda v, y=y, lam=lam: hybrid_loss(v, y, LossConfig(*lam)),
            _lovasz_generic(rng, ls, y))
    return cases


def suite_gradcheck(seed: int = 0, repeats: int = 10) -> list[CaseResult]:
    out = []
    for name, f, x in gradcheck_cases(seed, repeats):
        try:
            err = ad.grad_check(f, x)
        except FloatingPointError as exc:
            out.append(CaseResult(f"gradcheck {name}", False, str(exc)))
            continue
        out.append(CaseResult(f"gradcheck {name}", err < GRAD_TOL, f"rel_err={err:.3e}"))
    return out


# -------------------------------------------------------------- lovasz oracle


def suite_lovasz_oracle(max_len: int = 8, draws: int = 50, seed: int = 0) -> list[CaseResult]:
    """Every binary pattern of every length up to ``max_len``, ``draws`` logit draws each."""
    rng = np.random.default_rng(seed)
    out = []
    for p in range(1, max_len + 1):
        worst, count = 0.0, 0
        for pattern in itertools.product((0.0, 1.0), repeat=p):
            y = np.array(pattern)
            for _ in range(draws):
                s = rng.uniform(-2, 2, size=p)
                got = float(lovasz_hinge(s.reshape(1, 1, 1, p), y.reshape(1, 1, 1, p)).value)
                ref = 0.0 if not y.any() else lovasz_extension_oracle(1.0 - s * np.where(y > 0, 1.0, -1.0), y)
                worst = max(worst, abs(got - ref))
                count += 1
        out.append(CaseResult(f"lovasz-oracle p={p}", worst <= ORACLE_TOL,
                              f"{count} cases, max_abs_err={worst:.3e}"))
    return out


# ------------------------------------------------------------ divergence math


def suite_divergence_math() -> list[CaseResult]:
    out = []

    def check(name, got, want, tol=MATH_TOL):
        out.append(CaseResult(f"divergence {name}", abs(got - want) <= tol, f"got={got!r} want={want!r}"))

    check("kl (0,1)||(1,1)", kl_gaussian((0, 1), (1, 1)), 0.5)
    check("kl (0,1)||(0,4)", kl_gaussian((0, 1), (0, 4)), math.log(2) + 0.125 - 0.5)
    check("kl identical", kl_gaussian((0.3, 2.0), (0.3, 2.0)), 0.0)
    check("sym_kl (0,1)|(1,1)", sym_kl((0, 1), (1, 1)), 1.0)
    check("sym_kl (0,1)|(0,4)", sym_kl((0, 1), (0, 4)), 1.125)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        a = (rng.normal(), rng.uniform(0.01, 5))
        b = (rng.normal(), rng.uniform(0.01, 5))
        worst = max(worst, abs(sym_kl(a, b) - sym_kl(a, b, log_orientation="printed")))
    check("sym_kl log-orientation invariance (200 draws)", worst, 0.0)
    sa = ChannelStats.from_values(rng.normal(size=(50, 4)))
    check("layer_divergence(A, A)", layer_divergence(sa, sa), 0.0, 0.0)
    two_a = ChannelStats(1, np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    two_b = ChannelStats(1, np.array([1.0, 0.0]), np.array([1.0, 4.0]))
    check("layer_divergence {1.0, 1.125}", layer_divergence(two_a, two_b), 1.0625)
    return out


# ------------------------------------------------------------------ schedule


def suite_schedule() -> list[CaseResult]:
    out = []

    def check(name, got, want):
        out.append(CaseResult(f"schedule {name}", abs(got - want) <= MATH_TOL, f"got={got!r} want={want!r}"))

    full = OptimConfig(warmup_iters=1000, constant_iters=7000, poly_iters=17000)
    toy = OptimConfig()
    for label, cfg in (("full", full), ("toy", toy)):
        w, k, p = cfg.warmup_iters, cfg.constant_iters, cfg.poly_iters
        check(f"{label} warmup end", lr_at(cfg, w - 1), cfg.base_lr)
        check(f"{label} warmup start", lr_at(cfg, 0), cfg.base_lr / w)
        check(f"{label} constant", lr_at(cfg, w + k // 2), cfg.base_lr)
        check(f"{label} poly start", lr_at(cfg, w + k), cfg.base_lr)
        check(f"{label} poly midpoint", lr_at(cfg, w + k + p // 2), 0.01 * 0.5 ** 0.9)
    check("full iter 16500", lr_at(full, 16500), 0.01 * 0.5 ** 0.9)
    out.append(CaseResult("schedule 0.01*0.5^0.9 ~ 0.005359", abs(0.01 * 0.5 ** 0.9 - 0.005359) < 5e-7,
                          f"value={0.01 * 0.5 ** 0.9!r}"))
    return out


SUITES: dict[str, Callable[[], list[CaseResult]]] = {
    "gradcheck": suite_gradcheck,
    "lovasz-oracle": suite_lovasz_oracle,
    "divergence-math": suite_divergence_math,
    "schedule": suite_schedule,
}


def run_suite(name: str) -> list[CaseResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()
