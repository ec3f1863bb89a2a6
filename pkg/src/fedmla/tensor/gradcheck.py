"""Central finite-difference checks for every differentiable primitive."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .core import Tensor, add, mul, reshape, tsum

FD_EPS = 1e-5
REL_TOL = 1e-4


@dataclass
class OpReport:
    name: str
    cases: int = 0
    max_rel_err: float = 0.0
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.cases > 0


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error with a floor tied to the gradient scale."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    rng: np.random.Generator, eps: float = FD_EPS,
                    wrt: Optional[Sequence[int]] = None) -> float:
    """Compare backward() against finite differences for ``sum(fn(*inputs) * R)``.

    ``R`` is a fixed random projection, so the full vector-Jacobian product
    is exercised. Returns the max relative error over the checked inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    probe = fn(*[Tensor(a) for a in arrays])
    proj = rng.normal(size=probe.shape)

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    tsum(mul(out, proj)).backward()
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(scalar, arrays[i], eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape):
    # distinct values spaced well beyond the finite-difference step
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(float) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape)


def _dims(rng, lo=1, hi=3):
    return int(rng.integers(lo, hi + 1))


# Each case factory returns (callable, input arrays, optional wrt indices).
def _case_conv2d(rng):
    n, c, o = _dims(rng, 1, 2), _dims(rng, 1, 3), _dims(rng, 1, 3)
    k = int(rng.choice([1, 3]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    stride = int(rng.choice([1, 1, 2]))
    h, w = _dims(rng, 4, 7), _dims(rng, 4, 7)
    fn = lambda x, wt, b: ops.conv2d(x, wt, b, padding=pad, stride=stride)
    return fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)]


def _case_conv2d_wide(rng):
    # exercises the shifted-GEMM path (c * k * k > 16)
    n, c, o = _dims(rng, 1, 2), _dims(rng, 2, 4), _dims(rng, 1, 3)
    h, w = _dims(rng, 3, 6), _dims(rng, 3, 6)
    fn = lambda x, wt, b: ops.conv2d(x, wt, b, padding=1)
    return fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)]


def _case_conv2d_edge(rng):
    n, c, o = _dims(rng, 1, 2), _dims(rng, 1, 4), _dims(rng, 1, 3)
    h, w = _dims(rng, 2, 6), _dims(rng, 2, 6)
    fn = lambda x, wt, b: ops.conv2d(x, wt, b, padding=1, pad_mode="edge")
    return fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)]


def _case_pad_edge(rng):
    pad = _dims(rng, 1, 2)
    return (lambda x: ops.pad_edge(x, pad)), [rng.normal(size=(_dims(rng), _dims(rng), _dims(rng, 1, 4), _dims(rng, 1, 4)))]


def _case_batch_norm_train(rng):
    n, c, h, w = _dims(rng, 1, 3), _dims(rng), _dims(rng, 2, 4), _dims(rng, 2, 4)
    fn = lambda x, g, b: ops.batch_norm(x, g, b, None, None, True)
    return fn, [rng.normal(size=(n, c, h, w)) * 2 + 1, rng.normal(size=c), rng.normal(size=c)]


def _case_batch_norm_eval(rng):
    n, c, h, w = _dims(rng), _dims(rng), _dims(rng, 1, 4), _dims(rng, 1, 4)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)
    fn = lambda x, g, b: ops.batch_norm(x, g, b, rm, rv, False)
    return fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=c), rng.normal(size=c)]


def _case_instance_norm(rng):
    n, c, h, w = _dims(rng), _dims(rng), _dims(rng, 2, 4), _dims(rng, 2, 4)
    return (lambda x: ops.instance_norm(x, 1e-5)), [rng.normal(size=(n, c, h, w)) * 3 - 1]


def _case_relu(rng):
    return ops.relu, [_away_from_zero(rng, (_dims(rng), _dims(rng), _dims(rng, 1, 4), _dims(rng, 1, 4)))]


def _case_sigmoid(rng):
    return ops.sigmoid, [rng.normal(size=(_dims(rng), _dims(rng), _dims(rng, 1, 4), _dims(rng, 1, 4))) * 3]


def _case_max_pool(rng):
    shape = (_dims(rng), _dims(rng), 2 * _dims(rng), 2 * _dims(rng))
    return ops.max_pool2x2, [_distinct(rng, shape)]


def _case_upsample(rng):
    return ops.upsample_nearest2x, [rng.normal(size=(_dims(rng), _dims(rng), _dims(rng), _dims(rng)))]


def _case_gap(rng):
    return ops.global_avg_pool, [rng.normal(size=(_dims(rng), _dims(rng), _dims(rng), _dims(rng)))]


def _case_fully_connected(rng):
    n, i, o = _dims(rng, 1, 4), _dims(rng, 1, 5), _dims(rng, 1, 4)
    return ops.fully_connected, [rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o)]


def _case_softmax(rng):
    return ops.softmax, [rng.normal(size=(_dims(rng, 1, 4), _dims(rng, 2, 5))) * 2]


def _case_concat(rng):
    n, h, w = _dims(rng), _dims(rng), _dims(rng)
    return ops.concat_channels, [rng.normal(size=(n, _dims(rng), h, w)), rng.normal(size=(n, _dims(rng), h, w))]


def _case_slice(rng):
    c = _dims(rng, 2, 5)
    start = int(rng.integers(0, c - 1))
    stop = int(rng.integers(start + 1, c + 1))
    return (lambda x: ops.slice_channels(x, start, stop)), [rng.normal(size=(_dims(rng), c, _dims(rng), _dims(rng)))]


def _case_dice(rng):
    shape = (_dims(rng), 1, _dims(rng, 2, 4), _dims(rng, 2, 4))
    target = (rng.uniform(size=shape) > 0.5).astype(float)
    return (lambda p: ops.dice_loss(p, target)), [rng.uniform(0.05, 0.95, size=shape)]


def _case_cross_entropy(rng):
    n, k = _dims(rng, 1, 5), _dims(rng, 2, 4)
    labels = rng.integers(0, k, size=n)
    return (lambda p: ops.cross_entropy(p, labels)), [rng.uniform(0.05, 1.0, size=(n, k))]


def _case_softmax_cross_entropy(rng):
    n, k = _dims(rng, 1, 5), _dims(rng, 2, 4)
    labels = rng.integers(0, k, size=n)
    return (lambda z: ops.cross_entropy(ops.softmax(z), labels)), [rng.normal(size=(n, k))]


def _case_arith(rng):
    shape = (_dims(rng), _dims(rng, 1, 4))
    fn = lambda a, b: reshape(add(mul(a, b), a), (-1,))
    return fn, [rng.normal(size=shape), rng.normal(size=(1, shape[1]))]


CASES: Dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "conv2d_wide": _case_conv2d_wide,
    "conv2d_edge": _case_conv2d_edge,
    "pad_edge": _case_pad_edge,
    "batch_norm_train": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "instance_norm": _case_instance_norm,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "max_pool2x2": _case_max_pool,
    "upsample_nearest2x": _case_upsample,
    "global_avg_pool": _case_gap,
    "fully_connected": _case_fully_connected,
    "softmax": _case_softmax,
    "concat_channels": _case_concat,
    "slice_channels": _case_slice,
    "dice_loss": _case_dice,
    "cross_entropy": _case_cross_entropy,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "add_mul_reshape": _case_arith,
}


def run_gradcheck(cases: Optional[Dict[str, Callable]] = None, n_shapes: int = 20,
                  seed: int = 0, tol: float = REL_TOL) -> List[OpReport]:
    """Run every case factory ``n_shapes`` times on fresh random shapes."""
    cases = CASES if cases is None else cases
    reports = []
    for idx, (name, factory) in enumerate(cases.items()):
        rng = np.random.default_rng([seed, idx])
        rep = OpReport(name)
        for trial in range(n_shapes):
            fn, inputs, *rest = factory(rng)
            wrt = rest[0] if rest else None
            try:
                err = check_gradients(fn, inputs, rng, wrt=wrt)
            except Exception as exc:  # a crashing backward is a failure, not an abort
                rep.failures.append(f"trial {trial}: {type(exc).__name__}: {exc}")
                continue
            rep.cases += 1
            rep.max_rel_err = max(rep.max_rel_err, err)
            if not err < tol:
                shapes = ", ".join(str(np.shape(a)) for a in inputs)
                rep.failures.append(f"trial {trial}: rel err {err:.3e} on inputs {shapes}")
        reports.append(rep)
    return reports


def format_report(reports: List[OpReport], elapsed: Optional[float] = None) -> str:
    lines = [f"{'op':<24}{'cases':>6}  {'max rel err':>12}  status"]
    for r in reports:
        lines.append(f"{r.name:<24}{r.cases:>6}  {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
        lines.extend(f"    {msg}" for msg in r.failures[:3])
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def timed_gradcheck(**kwargs):
    t0 = time.perf_counter()
    reports = run_gradcheck(**kwargs)
    return reports, time.perf_counter() - t0
