"""Finite-difference gradient checks for ops, blocks and whole models.

Every check runs in float64. A scalar objective is built from the output
(a fixed random projection for non-scalar outputs), its analytic gradient is
compared with central differences at step ``1e-6``, and the error is measured
normwise over the gradient with respect to every checked tensor at once::

    rel = max|analytic - numeric| / max(max|analytic|, max|numeric|)
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import tensor as T
from ..batch_attention import BatchFormerConfig, batch_attention_v1, batch_attention_v2
from ..models import ModelConfig, build_model
from ..nn import EncoderBlock, Linear, MultiHeadSelfAttention, PatchEmbed
from ..seeds import SeedStreams
from ..tensor import Tensor
from ..twostream import two_stream_loss

STEP = 1e-6
TOLERANCE = 1e-5
SCOPES = ("ops", "blocks", "e2e")


@dataclass
class CheckResult:
    name: str
    scope: str
    trials: int
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.scope:6s} {self.name:22s} trials={self.trials:3d} "
                f"max_rel_err={self.max_rel_error:.3e} ({self.seconds:.1f}s)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: Optional[float] = None) -> float:
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    denom = scale if scale is not None else max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if denom == 0.0:
        return diff
    return diff / denom


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = STEP) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def check_tensors(objective: Callable[[], Tensor], tensors: list[Tensor],
                  rng: np.random.Generator, max_coords: Optional[int] = None) -> float:
    """Normwise relative error of the gradient w.r.t. all of ``tensors`` jointly.

    The gradient is treated as one vector, so a component that is exactly
    zero by symmetry (e.g. the key bias under softmax shift invariance) is
    judged against the scale of the whole gradient. With ``max_coords`` only
    that many randomly chosen coordinates are differenced; the scale still
    includes the full analytic gradient.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = objective()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f() -> float:
        with T.no_grad():
            return float(objective().data)

    coords = [(i, idx) for i, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in pick]
    a = np.array([analytic[i][idx] for i, idx in coords])
    n = np.array([numeric_grad(f, tensors[i].data, idx) for i, idx in coords])
    full = max(float(np.max(np.abs(g))) if g.size else 0.0 for g in analytic)
    return relative_error(a, n, max(full, float(np.max(np.abs(n)))))


def _projected(fn: Callable[[], Tensor], rng: np.random.Generator, shape) -> Callable[[], Tensor]:
    r = rng.uniform(-1, 1, size=shape)
    return lambda: (fn() * r).sum()


def _u(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


# -- case builders: each returns (objective, tensors_to_check, max_coords) ----

def _case_add(rng):
    a, b = _u(rng, 3, 4), _u(rng, 4)
    return _projected(lambda: a + b, rng, (3, 4)), [a, b], None


def _case_sub(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 3)
    return _projected(lambda: a - b, rng, (2, 3)), [a, b], None


def _case_mul(rng):
    a, b = _u(rng, 3, 1), _u(rng, 3, 4)
    return _projected(lambda: a * b, rng, (3, 4)), [a, b], None


def _case_div(rng):
    a = _u(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), requires_grad=True)
    return _projected(lambda: a / b, rng, (3, 4)), [a, b], None


def _case_matmul(rng):
    a, b = _u(rng, 3, 4), _u(rng, 4, 5)
    return _projected(lambda: a @ b, rng, (3, 5)), [a, b], None


def _case_matmul_batched(rng):
    a, b = _u(rng, 2, 3, 4), _u(rng, 4, 2)
    return _projected(lambda: a @ b, rng, (2, 3, 2)), [a, b], None


def _case_relu(rng):
    a = _u(rng, 4, 5)
    return _projected(lambda: T.relu(a), rng, (4, 5)), [a], None


def _case_exp_log(rng):
    a = Tensor(rng.uniform(0.5, 1.5, size=(6,)), requires_grad=True)
    return _projected(lambda: T.log(T.exp(a) + a), rng, (6,)), [a], None


def _case_softmax(rng):
    a = _u(rng, 5)
    return _projected(lambda: T.softmax_lastaxis(a), rng, (5,)), [a], None


def _case_softmax_rows(rng):
    a = _u(rng, 3, 4)
    return _projected(lambda: T.softmax_lastaxis(a), rng, (3, 4)), [a], None


def _case_layernorm(rng):
    x, g, b = _u(rng, 8), _u(rng, 8), _u(rng, 8)
    return _projected(lambda: T.layernorm(x, g, b, 1e-5), rng, (8,)), [x, g, b], None


def _case_layernorm_rows(rng):
    x, g, b = _u(rng, 2, 3, 4), _u(rng, 4), _u(rng, 4)
    return _projected(lambda: T.layernorm(x, g, b, 1e-5), rng, (2, 3, 4)), [x, g, b], None


def _case_dropout(rng):
    x = _u(rng, 4, 6)
    seed = int(rng.integers(1 << 31))
    fn = lambda: T.dropout(x, 0.5, np.random.default_rng(seed), True)
    return _projected(fn, rng, (4, 6)), [x], None


def _case_cross_entropy(rng):
    z = _u(rng, 3, 5)
    y = rng.integers(0, 5, size=3)
    return (lambda: T.cross_entropy(z, y)), [z], None


def _case_softmax_ordered(rng):
    a = _u(rng, 3, 4)
    return _projected(lambda: T.softmax_lastaxis(a, ordered=True), rng, (3, 4)), [a], None


def _case_ordered_sum(rng):
    x = _u(rng, 2, 3, 4)
    return _projected(lambda: T.ordered_sum(x, axis=1), rng, (2, 4)), [x], None


def _case_sum_mean(rng):
    x = _u(rng, 2, 3, 4)
    return _projected(lambda: x.sum(axis=2) + x.mean(axis=2) * 3.0, rng, (2, 3)), [x], None


def _case_shape_ops(rng):
    x = _u(rng, 4, 3, 2)

    def fn():
        a, b = T.split_axis0(x, 2)
        y = T.concat_axis0([b * 2.0, a])
        return T.permute_axes(y, (2, 0, 1)).reshape(2, 12)

    return _projected(fn, rng, (2, 12)), [x], None


def _case_concat(rng):
    a, b = _u(rng, 2, 3), _u(rng, 1, 3)
    return _projected(lambda: T.concat_axis0([a, b, a]), rng, (5, 3)), [a, b], None


def _params(module) -> list[Tensor]:
    return module.parameters()


def _case_linear(rng):
    lin = Linear(4, 3, rng)
    x = _u(rng, 2, 4)
    return _projected(lambda: lin(x), rng, (2, 3)), [x] + _params(lin), None


def _case_mhsa(rng):
    att = MultiHeadSelfAttention(4, 2, rng)
    x = _u(rng, 2, 3, 4)
    return _projected(lambda: att(x), rng, (2, 3, 4)), [x] + _params(att), None


def _case_mhsa_exact(rng):
    att = MultiHeadSelfAttention(4, 2, rng)
    x = _u(rng, 2, 3, 4)
    return _projected(lambda: att(x, exact=True), rng, (2, 3, 4)), [x] + _params(att), None


def _case_encoder_block(rng):
    blk = EncoderBlock(4, 2, 8, 0.0, rng)
    x = _u(rng, 1, 2, 4)
    return _projected(lambda: blk(x), rng, (1, 2, 4)), [x] + _params(blk), None


def _case_batch_attention_v2(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    x = _u(rng, 3, 2, 4)
    return _projected(lambda: batch_attention_v2(x, blk), rng, (3, 2, 4)), [x] + _params(blk), 90


def _case_batch_attention_v1(rng):
    blk = EncoderBlock(4, 2, 4, 0.0, rng)
    x = _u(rng, 3, 4)
    return _projected(lambda: batch_attention_v1(x, blk), rng, (3, 4)), [x] + _params(blk), 90


def _case_patch_embed(rng):
    pe = PatchEmbed(1, 4, 4, 2, 3, rng)
    img = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    return _projected(lambda: pe(img), rng, (2, 4, 3)), _params(pe), None


def _e2e(rng, arch: str):
    cfg = ModelConfig(arch=arch, depth=2, dim=8, heads=2, patch=4, ffn_width=16, channels=1,
                      height=8, width=8, num_classes=3)
    bf = BatchFormerConfig(heads=2, dropout=0.0, insert_positions=(0, 1))
    model = build_model(cfg, bf, SeedStreams(int(rng.integers(1 << 31))))
    model.train()
    images = rng.uniform(-1, 1, size=(3, 1, 8, 8))
    labels = rng.integers(0, 3, size=(3,) if arch == "vit" else (3, cfg.num_patches))
    return (lambda: two_stream_loss(model(images), labels)), model.parameters(), 24


def _case_tinyvit(rng):
    return _e2e(rng, "vit")


def _case_densenet(rng):
    return _e2e(rng, "dense")


CASES: dict[str, list[tuple[str, Callable]]] = {
    "ops": [
        ("add", _case_add), ("sub", _case_sub), ("mul", _case_mul), ("div", _case_div),
        ("matmul", _case_matmul), ("matmul_batched", _case_matmul_batched), ("relu", _case_relu),
        ("exp_log", _case_exp_log), ("softmax", _case_softmax), ("softmax_rows", _case_softmax_rows),
        ("softmax_ordered", _case_softmax_ordered), ("ordered_sum", _case_ordered_sum),
        ("layernorm", _case_layernorm), ("layernorm_rows", _case_layernorm_rows),
        ("dropout", _case_dropout), ("cross_entropy", _case_cross_entropy),
        ("sum_mean", _case_sum_mean), ("split_concat_permute", _case_shape_ops),
        ("concat", _case_concat),
    ],
    "blocks": [
        ("linear", _case_linear), ("mhsa", _case_mhsa), ("mhsa_exact", _case_mhsa_exact),
        ("encoder_block", _case_encoder_block),
        ("batch_attention_v2", _case_batch_attention_v2), ("batch_attention_v1", _case_batch_attention_v1),
        ("patch_embed", _case_patch_embed),
    ],
    "e2e": [("tinyvit_two_stream", _case_tinyvit), ("densenet_two_stream", _case_densenet)],
}


def run_case(scope: str, name: str, builder: Callable, trials: int = 100, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    with T.precision("float64"):
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, sum(map(ord, name))])
            objective, tensors, max_coords = builder(rng)
            worst = max(worst, check_tensors(objective, tensors, rng, max_coords))
    return CheckResult(name, scope, trials, worst, time.perf_counter() - t0)


def run_gradcheck(scopes=SCOPES, trials: int = 100, seed: int = 0,
                  on_result: Optional[Callable[[CheckResult], None]] = None) -> list[CheckResult]:
    results = []
    for scope in scopes:
        if scope not in CASES:
            raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
        for name, builder in CASES[scope]:
            res = run_case(scope, name, builder, trials, seed)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results
