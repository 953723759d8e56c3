"""Central-difference gradient checks for every op and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .hierarchy import EmotionHierarchy, leaves_to_paths, load_hierarchy
from .model import MdanConfig, MdanModel, compute_cam, lcam_apply, lcam_fuse, mhcca
from .tensor import Tensor

OP_THRESHOLD = 1e-6
MODEL_THRESHOLD = 1e-4
# Step for the end-to-end check.  Gradients of the deep global weights are
# tiny there, so h = 1e-6 lets round-off dominate the difference quotient.
MODEL_STEP = 1e-5


@dataclass
class CheckRow:
    name: str
    error: float
    threshold: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.threshold)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def _projected(out: Tensor, r: np.ndarray) -> Tensor:
    # random linear readout so every output coordinate contributes
    return T.tensor_sum(T.mul(out, Tensor(r)))


def _check_inputs(fn: Callable[..., Tensor], arrays: list[np.ndarray], rng, h: float) -> float:
    """Max error over each input of ``fn``, the others held fixed."""
    probe = fn(*[Tensor(a) for a in arrays])
    r = rng.normal(size=probe.shape)
    worst = 0.0
    for i in range(len(arrays)):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = x
            return _projected(fn(*args), r)
        worst = max(worst, T.grad_check(f, arrays[i].copy(), h=h))
    return worst


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    n = rng.normal
    mask = np.array([[True, False, True], [False, True, True]])
    return [
        ("matmul", T.matmul, [n(size=(3, 4)), n(size=(4, 2))]),
        ("matmul_batched", T.matmul, [n(size=(2, 3, 4)), n(size=(2, 4, 5))]),
        ("conv2d_3x3_s2_p1", lambda x, w: T.conv2d(x, w, stride=2, pad=1), [n(size=(2, 3, 6, 6)), n(size=(4, 3, 3, 3))]),
        ("conv2d_1x1", T.conv2d, [n(size=(2, 3, 4, 4)), n(size=(5, 3, 1, 1))]),
        ("upsample_bilinear_2x", T.upsample_bilinear_2x, [n(size=(2, 3, 3, 4))]),
        ("softmax", T.softmax_lastdim, [n(size=(3, 5))]),
        ("global_avg_pool", T.global_avg_pool, [n(size=(2, 3, 4, 4))]),
        ("add", T.add, [n(size=(2, 3, 4)), n(size=(2, 3, 4))]),
        ("add_broadcast", T.add, [n(size=(2, 3, 4, 4)), n(size=(2, 1, 4, 4))]),
        ("mul", T.mul, [n(size=(2, 3, 4)), n(size=(2, 3, 4))]),
        ("mul_broadcast", T.mul, [n(size=(2, 1, 4, 4)), n(size=(2, 3, 4, 4))]),
        ("shift", lambda x: T.add(x, 1.5), [n(size=(3, 4))]),
        ("scale", lambda x: T.scale(x, -0.7), [n(size=(3, 4))]),
        ("relu", T.relu, [_away_from_zero(rng, (3, 5))]),
        ("reshape", lambda x: T.reshape(x, (4, 6)), [n(size=(2, 3, 4))]),
        ("permute", lambda x: T.permute(x, (2, 0, 1)), [n(size=(2, 3, 4))]),
        ("concat", lambda a, b: T.concat_lastdim([a, b]), [n(size=(2, 3)), n(size=(2, 4))]),
        ("sum", T.tensor_sum, [n(size=(3, 4))]),
        # the op checks that its rows are distributions, so it is probed through a softmax
        ("cross_entropy", lambda z: T.cross_entropy(T.softmax_lastdim(z), np.array([0, 3, 1])), [n(size=(3, 4))]),
        ("masked_channel_mean", lambda x: T.masked_channel_mean(x, mask), [n(size=(2, 3, 4, 4))]),
        ("masked_channel_max", lambda x: T.masked_channel_max(x, mask), [n(size=(2, 3, 4, 4))]),
        ("minmax_normalize", T.minmax_normalize, [n(size=(2, 1, 4, 4))]),
        ("compute_cam", compute_cam, [n(size=(2, 4, 3, 3)), n(size=(3, 4))]),
        ("lcam_fuse", lambda c: lcam_fuse(c, mask), [n(size=(2, 3, 4, 4))]),
        ("lcam_apply", lcam_apply, [np.abs(n(size=(2, 1, 4, 4))), n(size=(2, 3, 4, 4))]),
        ("mhcca", lambda f, c, q, o: mhcca(f, c, q, o, heads=2)[0],
         [n(size=(2, 4, 2, 2)), n(size=(2, 3, 4, 4)), n(size=(4, 4, 1, 1)), n(size=(4, 4, 1, 1))]),
    ]


def check_ops(seed: int = 0, h: float = 1e-6, threshold: float = OP_THRESHOLD) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    return [CheckRow(name, _check_inputs(fn, arrays, rng, h), threshold) for name, fn, arrays in op_cases(rng)]


def toy_config() -> MdanConfig:
    return MdanConfig(input_size=32, widths=(4, 8, 16, 32), pyramid_width=8)


def check_model(hierarchy: EmotionHierarchy | None = None, config: MdanConfig | None = None, seed: int = 0,
                batch: int = 2, h: float = MODEL_STEP, threshold: float = MODEL_THRESHOLD) -> CheckRow:
    """End-to-end check of the joint loss w.r.t. every parameter tensor."""
    hierarchy = hierarchy or load_hierarchy("ekman")
    config = config or toy_config()
    model = MdanModel(config, hierarchy, seed=seed + 1)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, 3, config.input_size, config.input_size))
    paths = leaves_to_paths(hierarchy, rng.integers(0, hierarchy.level_sizes[-1], size=batch))
    errs = T.grad_check_params(lambda: model.loss(x, paths), model.params, h=h)
    return CheckRow("joint_loss", max(errs.values()), threshold)


def run_suite(seed: int = 0, hierarchy: EmotionHierarchy | None = None) -> tuple[list[CheckRow], float]:
    start = time.perf_counter()
    rows = check_ops(seed)
    rows.append(check_model(hierarchy, seed=seed))
    return rows, time.perf_counter() - start


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max rel err':>11}  {'threshold':>9}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.error:11.3e}  {r.threshold:9.0e}  {'pass' if r.ok else 'FAIL'}")
    return "\n".join(lines)
