"""Central finite differences for checking reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, indices: Optional[Iterable] = None,
                 h: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of d loss / d t at the given flat ``indices``.

    ``loss_fn`` is re-evaluated with ``t.data`` perturbed in place; the
    original values are restored afterwards.
    """
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    indices = list(indices)
    out = np.zeros(len(indices), dtype=np.float64)
    with no_grad():
        for j, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(|a|_inf, |n|_inf, floor).

    Normalising by the tensor-wide magnitude keeps near-zero coordinates from
    dominating. ``floor`` makes the test absolute (``floor * tol``) for
    tensors whose gradient is ~0, where the central difference is pure
    roundoff: a conv bias feeding instance normalisation has an exactly zero
    gradient, but its difference quotient is ~eps*|loss|/h.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def _probe(loss_fn, flat, i, h):
    """(f(x+h), f(x-h)) at flat coordinate ``i``; the value is restored."""
    orig = flat[i]
    flat[i] = orig + h
    fp = float(loss_fn().data)
    flat[i] = orig - h
    fm = float(loss_fn().data)
    flat[i] = orig
    return fp, fm


def near_kink(loss_fn, t: Tensor, i: int, h: float, f0: float) -> bool:
    """True when the loss is not smooth within ``h`` of coordinate ``i``.

    For a smooth loss the central quotients at ``h`` and ``h/4`` agree to
    roundoff and the one-sided mismatch ``(f+ - 2 f0 + f-) / h`` shrinks in
    proportion to ``h``. A relu or max-pool switch inside the probe interval
    breaks one of the two. Only forward evaluations are used, so the test
    cannot hide an error in the backward pass.
    """
    flat = t.data.reshape(-1)
    with no_grad():
        fp1, fm1 = _probe(loss_fn, flat, i, h)
        fp4, fm4 = _probe(loss_fn, flat, i, h / 4)
    noise = 10 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / (h / 4)
    c1, c4 = (fp1 - fm1) / (2 * h), (fp4 - fm4) / (h / 2)
    m1, m4 = (fp1 - 2 * f0 + fm1) / h, (fp4 - 2 * f0 + fm4) / (h / 4)
    return abs(c1 - c4) > noise or abs(m4) > 0.5 * abs(m1) + noise


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None, h: float = 1e-6, skip_kinks: bool = True,
                    stats: Optional[dict] = None, tol: float = 1e-5) -> dict:
    """Compare backward() against finite differences for each named tensor.

    Returns ``{name: max_relative_error}``. With ``max_coords`` a random
    subset of that many coordinates per tensor is checked. With
    ``skip_kinks`` a coordinate whose difference quotient disagrees by more
    than ``tol / 10`` is re-probed (see :func:`near_kink`); if the loss is
    not smooth there, it is replaced by another random coordinate. ``stats``
    (optional dict) receives ``{name: skipped_count}``.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    f0 = float(loss.data)
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, t in tensors.items():
        order = rng.permutation(t.size) if max_coords is not None and t.size > max_coords else np.arange(t.size)
        want = t.size if max_coords is None else min(max_coords, t.size)
        a_flat = analytic[name].reshape(-1)
        kept_a, kept_n, skipped = [], [], 0
        for i in order:
            if len(kept_a) == want:
                break
            n = numeric_grad(loss_fn, t, [i], h=h)[0]
            a = a_flat[i]
            if skip_kinks and abs(a - n) > 0.1 * tol * max(abs(a), abs(n), 1e-3) and near_kink(loss_fn, t, i, h, f0):
                skipped += 1
                continue
            kept_a.append(a)
            kept_n.append(n)
        errors[name] = relative_error(np.array(kept_a), np.array(kept_n))
        if stats is not None:
            stats[name] = skipped
    return errors


def primitive_suite(seed: int = 0, tol: float = 1e-5) -> dict:
    """Gradient check of every primitive op on small random float64 inputs.

    Each op output is reduced with a fixed random projection so every output
    element carries weight. Returns ``{case: max_relative_error}``.
    """
    from . import ops

    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def away_from_zero(*shape):
        x = rng.standard_normal(shape)
        return Tensor(np.where(np.abs(x) < 0.1, 0.1 * np.sign(x) + 0.1 * (x == 0), x), requires_grad=True)

    cases = {
        "add": lambda a=t(2, 3), b=t(2, 3): (lambda: ops.add(a, b), (a, b)),
        "sub": lambda a=t(2, 3), b=t(2, 3): (lambda: ops.sub(a, b), (a, b)),
        "mul": lambda a=t(3, 2), b=t(3, 2): (lambda: ops.mul(a, b), (a, b)),
        "div": lambda a=t(3, 2), b=away_from_zero(3, 2): (lambda: ops.div(a, b), (a, b)),
        "sum": lambda a=t(2, 3, 4): (lambda: ops.sum(a, axis=(0, 2)), (a,)),
        "mean": lambda a=t(2, 3, 4): (lambda: ops.mean(a, axis=1), (a,)),
        "reshape": lambda a=t(2, 6): (lambda: ops.reshape(a, (3, 4)), (a,)),
        "flatten": lambda a=t(2, 3, 2): (lambda: ops.flatten(a, 1), (a,)),
        "concat": lambda a=t(2, 3), b=t(2, 1): (lambda: ops.concat([a, b], axis=1), (a, b)),
        "expand": lambda a=t(3, 1, 1): (lambda: ops.expand(a, (3, 2, 4)), (a,)),
        "relu": lambda a=away_from_zero(4, 5): (lambda: ops.relu(a), (a,)),
        "sigmoid": lambda a=t(4, 5): (lambda: ops.sigmoid(a), (a,)),
        "softmax": lambda a=t(3, 5): (lambda: ops.softmax(a, axis=1), (a,)),
        "conv2d": lambda x=t(2, 6, 5), w=t(3, 2, 3, 3), b=t(3): (lambda: ops.conv2d(x, w, b, 1, 1), (x, w, b)),
        "conv2d_stride2": lambda x=t(2, 6, 6), w=t(2, 2, 3, 3), b=t(2): (lambda: ops.conv2d(x, w, b, 2, 1), (x, w, b)),
        "conv3d": lambda x=t(2, 4, 3, 4), w=t(2, 2, 3, 3, 3), b=t(2): (lambda: ops.conv3d(x, w, b, 1, 1), (x, w, b)),
        "maxpool2d": lambda a=t(2, 4, 6): (lambda: ops.maxpool(a, 2, 2), (a,)),
        "maxpool3d": lambda a=t(2, 4, 2, 4): (lambda: ops.maxpool(a, 2, 3), (a,)),
        "avg_pool3d": lambda a=t(2, 4, 2, 4): (lambda: ops.avg_pool(a, 2, 3), (a,)),
        "adaptive_avg_pool": lambda a=t(2, 5, 7): (lambda: ops.adaptive_avg_pool(a, (3, 4)), (a,)),
        "upsample_nearest": lambda a=t(2, 3, 2): (lambda: ops.upsample(a, 2, "nearest", 2), (a,)),
        "upsample_bilinear": lambda a=t(2, 3, 4): (lambda: ops.upsample(a, 2, "bilinear", 2), (a,)),
        "upsample_trilinear": lambda a=t(1, 2, 3, 2): (lambda: ops.upsample(a, 2, "trilinear", 3), (a,)),
        "instance_norm2d": lambda x=t(3, 4, 3), g=t(3), b=t(3): (lambda: ops.instance_norm(x, g, b), (x, g, b)),
        "instance_norm3d": lambda x=t(2, 3, 2, 3), g=t(2), b=t(2): (
            lambda: ops.instance_norm(x, g, b, spatial_dims=3), (x, g, b)),
        "contract": lambda a=t(2, 3, 4), b=t(3, 4, 5): (lambda: ops.contract("nhd,hdc->nc", a, b), (a, b)),
    }
    errors = {}
    for name, make in cases.items():
        fn, tensors = make()
        r = Tensor(rng.standard_normal(fn().shape))
        errs = check_gradients(lambda: ops.sum(ops.mul(fn(), r)), {str(i): x for i, x in enumerate(tensors)},
                               rng=rng, tol=tol)
        errors[name] = max(errs.values())
    return errors
