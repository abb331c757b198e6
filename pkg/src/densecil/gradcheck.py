"""Central-difference gradient verification for every registered op and for
a full densely-connected block.

The numeric side perturbs raw input arrays and re-runs the forward pass,
so it never touches the backward implementation it is checking.  Outputs
are scalarized through a fixed random weighting to exercise the whole
Jacobian.
"""

from __future__ import annotations

import numpy as np

from . import expansion as E
from . import tensor as T
from .config import TOL


def central_difference(f, array: np.ndarray, h: float = TOL.fd_step) -> np.ndarray:
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(ad: np.ndarray, fd: np.ndarray) -> float:
    denom = max(np.abs(ad).max(initial=0.0), np.abs(fd).max(initial=0.0), 1.0)
    return float(np.abs(ad - fd).max(initial=0.0) / denom)


def check_function(build, arrays: list[np.ndarray], seed: int = 0) -> float:
    """Worst relative error between backprop and finite differences.

    ``build(tensors) -> Tensor`` evaluates the op under test on fresh leaf
    tensors; returns the max error across all inputs.
    """
    rng = np.random.default_rng(seed)
    with T.no_grad():
        probe_shape = build([T.Tensor(a) for a in arrays]).shape
    probe = rng.normal(size=probe_shape) if probe_shape else np.asarray(1.0)

    def scalar(tensors=None):
        ts = tensors if tensors is not None else [T.Tensor(a) for a in arrays]
        return ts, T.sum_all(T.mul(build(ts), T.Tensor(probe)))

    ts, loss = scalar([T.Tensor(a, requires_grad=True) for a in arrays])
    T.backward(loss)
    worst = 0.0
    for tensor, array in zip(ts, arrays):
        fd = central_difference(lambda: scalar()[1].item(), array)
        ad = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        worst = max(worst, relative_error(ad, fd))
    return worst


def _r(rng, *shape):
    return rng.normal(size=shape)


def op_cases() -> dict:
    """Builders for every differentiable primitive, keyed by op name."""
    return {
        "add": lambda r: ([_r(r, 3, 4), _r(r, 3, 4)], lambda t: T.add(t[0], t[1])),
        "sub": lambda r: ([_r(r, 3, 4), _r(r, 3, 4)], lambda t: T.sub(t[0], t[1])),
        "mul": lambda r: ([_r(r, 3, 4), _r(r, 1, 4)], lambda t: T.mul(t[0], t[1])),
        "neg": lambda r: ([_r(r, 5)], lambda t: T.neg(t[0])),
        "matmul": lambda r: ([_r(r, 3, 4), _r(r, 4, 2)], lambda t: T.matmul(t[0], t[1])),
        "bmm": lambda r: ([_r(r, 2, 3, 4), _r(r, 2, 4, 3)], lambda t: T.bmm(t[0], t[1])),
        "linear": lambda r: ([_r(r, 3, 4), _r(r, 4, 2), _r(r, 2)],
                             lambda t: T.linear(t[0], t[1], t[2])),
        "reshape": lambda r: ([_r(r, 2, 6)], lambda t: T.reshape(t[0], (3, 4))),
        "swap_axes": lambda r: ([_r(r, 2, 3, 4)], lambda t: T.swap_axes(t[0], 0, 2)),
        "concat": lambda r: ([_r(r, 2, 3), _r(r, 2, 2)], lambda t: T.concat(t, axis=1)),
        "narrow": lambda r: ([_r(r, 4, 5)], lambda t: T.narrow(t[0], 1, 1, 3)),
        "sum": lambda r: ([_r(r, 3, 4)], lambda t: T.sum_all(t[0])),
        "mean": lambda r: ([_r(r, 3, 4)], lambda t: T.mean_all(t[0])),
        "softmax_rows": lambda r: ([_r(r, 3, 5)], lambda t: T.softmax_rows(t[0], 2.0)),
        "masked_softmax_rows": lambda r: (
            [_r(r, 3, 5)],
            lambda t: T.masked_softmax_rows(
                t[0], np.tile([True, False, True, True, False], (3, 1)), 2.0)),
        "log_softmax_rows": lambda r: ([_r(r, 3, 5)], lambda t: T.log_softmax_rows(t[0])),
        "layer_norm": lambda r: ([_r(r, 4, 6), _r(r, 6), _r(r, 6)],
                                 lambda t: T.layer_norm(t[0], t[1], t[2], 1e-5)),
        "gelu": lambda r: ([_r(r, 4, 4)], lambda t: T.gelu(t[0])),
        "log": lambda r: ([np.abs(_r(r, 3, 3)) + 0.5], lambda t: T.log(t[0])),
        "exp": lambda r: ([_r(r, 3, 3)], lambda t: T.exp(t[0])),
        "cross_entropy": lambda r: ([_r(r, 6)],
                                    lambda t: T.cross_entropy_logits(t[0], 2)),
    }


def dne_block_case(seed: int = 0):
    """A 2-task densely-connected model; checks the gradient of the logits
    with respect to every trainable parameter through MHSA, TAB and the
    token head at once."""
    cfg = E.ModelConfig(image_size=8, patch_size=4, in_channels=3, head_dim=4,
                        gamma=2, layers=1, strategy="dne")
    model = E.CilModel(cfg, seed=seed)
    model.add_expert(2, 2)
    model.add_expert(1, 2)
    rng = np.random.default_rng(seed + 77)
    image = rng.random((3, 8, 8))
    params = model.trainable_parameters()
    arrays = [p.data for p in params]
    probe = rng.normal(size=(model.total_classes,))

    def scalar() -> float:
        with T.no_grad():
            res = model.forward(image)
        return float(res.logits.data @ probe)

    res = model.forward(image)
    loss = T.sum_all(T.mul(res.logits, T.Tensor(probe)))
    T.backward(loss)
    worst = 0.0
    for p, a in zip(params, arrays):
        fd = central_difference(scalar, a)
        ad = p.grad if p.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(ad, fd))
    return worst


def run_all(points: int = 10, seed: int = 0, verbose: bool = False) -> list[tuple[str, float, bool]]:
    """Check every op at ``points`` seeded inputs plus the full block.

    Returns (name, worst relative error, passed) per case.
    """
    results = []
    for name, case in sorted(op_cases().items()):
        worst = 0.0
        for point in range(points):
            rng = np.random.default_rng(seed + 7919 * point + hash(name) % 104729)
            arrays, build = case(rng)
            worst = max(worst, check_function(build, arrays, seed=seed + point))
        ok = worst < TOL.fd_rel
        results.append((name, worst, ok))
        if verbose:
            print(f"  {name:<22s} rel_err={worst:.3e} {'ok' if ok else 'FAIL'}")
    block_err = dne_block_case(seed)
    ok = block_err < TOL.fd_rel
    results.append(("dne_block", block_err, ok))
    if verbose:
        print(f"  {'dne_block':<22s} rel_err={block_err:.3e} {'ok' if ok else 'FAIL'}")
    return results
