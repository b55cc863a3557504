"""Central finite-difference verification of analytic gradients.

Every check runs in 64-bit precision. The op under test is reduced to a
scalar by a fixed random projection of its output, so one backward pass
yields the full gradient of every input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .models import kl_divergence, reparameterize
from .tensor import Tape, Tensor, precision

STEP = 1e-4
FLOOR = 1e-8


@dataclass
class GradCheckReport:
    op: str
    seed: int
    tolerance: float
    max_rel_err: Dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
    op: str = "op",
    seed: int = 0,
    corrupt: float = 1.0,
) -> GradCheckReport:
    """Compare ``fn``'s backward pass against central differences.

    ``fn`` takes one Tensor per entry of ``inputs`` and returns a Tensor.
    ``corrupt`` scales the analytic gradient; anything but 1.0 is a
    negative control that should fail.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    names = list(names) if names is not None else [f"x{i}" for i in range(len(inputs))]
    report = GradCheckReport(op, seed, tolerance)
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        with Tape():
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*tensors)
            proj = rng.standard_normal(out.shape)
            F.sum(F.mul(out, Tensor(proj))).backward()
            analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def scalar(values):
            with Tape():
                return float(np.sum(fn(*[Tensor(v) for v in values]).data * proj))

        for idx, (name, base) in enumerate(zip(names, arrays)):
            numeric = np.zeros_like(base)
            flat = numeric.reshape(-1)
            for j in range(base.size):
                values = list(arrays)
                plus, minus = base.copy(), base.copy()
                plus.reshape(-1)[j] += STEP
                minus.reshape(-1)[j] -= STEP
                values[idx] = plus
                f_plus = scalar(values)
                values[idx] = minus
                f_minus = scalar(values)
                flat[j] = (f_plus - f_minus) / (2 * STEP)
            report.max_rel_err[name] = relative_error(analytic[idx] * corrupt, numeric)
    return report


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _bn_case(training):
    def case(rng):
        state = F.BatchNormState.fresh(3, dtype=np.float64)
        if not training:
            state.running_mean[:] = rng.standard_normal(3)
            state.running_var[:] = rng.uniform(0.5, 2.0, 3)

        def fn(x, g, b):
            return F.batchnorm2d(x, g, b, state, training=training)

        return fn, [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)], ["input", "gamma", "beta"]

    return case


def _eps_case(rng):
    eps = rng.standard_normal((3, 4))
    return (
        lambda mu, lv: reparameterize(mu, lv, eps=eps),
        [rng.standard_normal((3, 4)), 0.5 * rng.standard_normal((3, 4))],
        ["mu", "logvar"],
    )


def _bce_case(rng):
    target = (rng.uniform(size=(2, 1, 3, 3)) > 0.5).astype(np.float64)
    return lambda x: F.loss_bce_logits(x, target), [3 * rng.standard_normal((2, 1, 3, 3))], ["logits"]


def _l1_case(rng):
    a = rng.standard_normal((2, 3, 4))
    b = a + _away_from_zero(rng, a.shape)
    return F.loss_l1, [a, b], ["a", "b"]


CASES: Dict[str, Callable] = {
    "conv2d": lambda rng: (
        lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1),
        [rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 4, 4)), rng.standard_normal(4)],
        ["input", "weight", "bias"],
    ),
    "conv_transpose2d": lambda rng: (
        lambda x, w, b: F.conv_transpose2d(x, w, b, stride=2, padding=1),
        [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((4, 3, 4, 4)), rng.standard_normal(3)],
        ["input", "weight", "bias"],
    ),
    "batchnorm2d": _bn_case(True),
    "batchnorm2d_eval": _bn_case(False),
    "relu": lambda rng: (F.relu, [_away_from_zero(rng, (4, 4))], ["input"]),
    "leaky_relu": lambda rng: (lambda x: F.leaky_relu(x, 0.2), [_away_from_zero(rng, (4, 4))], ["input"]),
    "tanh": lambda rng: (F.tanh, [rng.standard_normal((4, 4))], ["input"]),
    "sigmoid": lambda rng: (F.sigmoid, [rng.standard_normal((4, 4))], ["input"]),
    "linear": lambda rng: (
        F.linear,
        [rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)],
        ["input", "weight", "bias"],
    ),
    "concat_channels": lambda rng: (
        F.concat_channels,
        [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))],
        ["a", "b"],
    ),
    "loss_bce_logits": _bce_case,
    "loss_l1": _l1_case,
    "loss_mse": lambda rng: (F.loss_mse, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))], ["a", "b"]),
    "reparameterize": _eps_case,
    "kl_divergence": lambda rng: (
        kl_divergence,
        [rng.standard_normal((3, 4)), 0.5 * rng.standard_normal((3, 4))],
        ["mu", "logvar"],
    ),
}


def run_suite(
    ops: Optional[Sequence[str]] = None, tolerance: float = 1e-4, seeds: Sequence[int] = range(5)
) -> List[GradCheckReport]:
    """Check every registered op (or the named subset) once per seed."""
    names = list(CASES) if not ops else list(ops)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; available: {', '.join(CASES)}")
    reports = []
    for name in names:
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs, input_names = CASES[name](rng)
            reports.append(grad_check(fn, inputs, tolerance, rng, input_names, op=name, seed=seed))
    return reports
