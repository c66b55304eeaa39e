"""Finite-difference check of every differentiable op and every model graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from demixkit.autodiff import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    concat,
    crop_time,
    linear,
    mae_loss,
    matmul,
    mul,
    relu,
    softmax_cross_entropy,
    stats_pool,
    sub,
    sum_all,
    tdnn_splice,
)
from demixkit.autodiff.gradcheck import check_gradients
from demixkit.demix import VARIANTS, DemixHead
from demixkit.embedding import MIN_FRAMES, Classifier, Extractor, ExtractorConfig

TOLERANCE = 1e-4
Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _p(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _binary(op):
    def case(rng):
        a, b = _p(rng, 3, 4), _p(rng, 3, 4)
        r = Tensor(rng.normal(size=(3, 4)))
        return lambda: sum_all(mul(op(a, b), r)), [a, b]
    return case


def _unary(make_input, op):
    def case(rng):
        x = make_input(rng)
        r = Tensor(rng.normal(size=op(Tensor(x.data)).shape))
        return lambda: sum_all(mul(op(x), r)), [x]
    return case


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    return lambda: sum_all(matmul(a, b)), [a, b]


def _linear(rng):
    x, W, b = _p(rng, 5, 3), _p(rng, 3, 4), _p(rng, 1, 4)
    r = Tensor(rng.normal(size=(5, 4)))
    return lambda: sum_all(mul(linear(x, W, b), r)), [x, W, b]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 5)
    r = Tensor(rng.normal(size=(2, 8)))
    return lambda: sum_all(mul(concat(a, b), r)), [a, b]


def _batch_norm(training):
    def case(rng):
        x, g, b = _p(rng, 2, 6, 3), _p(rng, 1, 3), _p(rng, 1, 3)
        r = Tensor(rng.normal(size=(2, 6, 3)))
        st = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3), 0.9, 1e-5)

        def fn():
            # a copy keeps repeated evaluations from drifting the running stats
            s = BatchNormState(st.running_mean.copy(), st.running_var.copy(), st.momentum, st.eps)
            return sum_all(mul(batch_norm(x, g, b, s, training), r))
        return fn, [x, g, b]
    return case


def _mae(rng):
    a, b = _p(rng, 4, 5), _p(rng, 4, 5)
    return lambda: mae_loss(a, b), [a, b]


def _xent(rng):
    z = _p(rng, 6, 4)
    y = rng.integers(0, 4, size=6)
    return lambda: softmax_cross_entropy(z, y), [z]


def _demix(variant, final_activation="relu"):
    def case(rng):
        head = DemixHead(variant, dim=6, seed=int(rng.integers(1 << 30)), final_activation=final_activation)
        for t in head.params.values():
            t.data[...] = rng.normal(0.0, 0.5, size=t.shape)
        e_mix, e_known, target = (Tensor(rng.normal(size=(4, 6))) for _ in range(3))
        return lambda: mae_loss(head.forward(e_mix, e_known), target), head.parameters()
    return case


def _speaker_net(rng):
    cfg = ExtractorConfig(feat_dim=4, width=5, pool_width=6, embed_dim=5)
    ex = Extractor(cfg, seed=int(rng.integers(1 << 30)))
    clf = Classifier(3, embed_dim=5, hidden=5, seed=1)
    x = Tensor(rng.normal(size=(3, MIN_FRAMES + 2, 4)))
    y = rng.integers(0, 3, size=3)
    states = {id(ps): {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in ps.bn.items()} for ps in (ex, clf)}

    def fn():
        for ps in (ex, clf):
            for k, (m, v) in states[id(ps)].items():
                ps.bn[k].running_mean, ps.bn[k].running_var = m.copy(), v.copy()
        return softmax_cross_entropy(clf.logits(ex.forward(x, True), True), y)
    return fn, ex.parameters() + clf.parameters()


CASES: dict[str, Case] = {
    "add": _binary(add),
    "sub": _binary(sub),
    "mul": _binary(mul),
    "matmul": _matmul,
    "linear": _linear,
    "relu": _unary(lambda r: _p(r, 4, 5), relu),
    "concat": _concat,
    "tdnn_splice": _unary(lambda r: _p(r, 2, 7, 3), lambda x: tdnn_splice(x, (-2, 0, 1))),
    "crop_time": _unary(lambda r: _p(r, 2, 7, 3), lambda x: crop_time(x, 2, 3)),
    "sum_all": _unary(lambda r: _p(r, 3, 3), lambda x: mul(sum_all(x), sum_all(x))),
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "stats_pool": _unary(lambda r: _p(r, 2, 6, 3), stats_pool),
    "mae_loss": _mae,
    "softmax_cross_entropy": _xent,
    "speaker_network": _speaker_net,
}
CASES.update({f"demix_{v}": _demix(v) for v in VARIANTS})
CASES.update({f"demix_{v}_linear_out": _demix(v, "none") for v in ("share-concat", "separate-concat")})
# whole-model graphs: compared on the full parameter-gradient vector
NETWORK_CASES = {"speaker_network"}


@dataclass(frozen=True)
class CaseResult:
    name: str
    worst_error: float
    points: int

    @property
    def ok(self) -> bool:
        return self.worst_error < TOLERANCE


def run_suite(points: int = 10, seed: int = 0, max_coords: int = 12,
              names: list[str] | None = None) -> list[CaseResult]:
    """Worst relative error of each case over ``points`` random draws."""
    results = []
    for name in names or list(CASES):
        worst = 0.0
        for k in range(points):
            rng = np.random.default_rng([seed, k, sum(map(ord, name))])
            fn, inputs = CASES[name](rng)
            joint = name in NETWORK_CASES
            worst = max(worst, check_gradients(fn, inputs, max_coords=max_coords, rng=rng, joint=joint))
        results.append(CaseResult(name, worst, points))
    return results
