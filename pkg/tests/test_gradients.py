"""Analytic gradients against central finite differences (h = 1e-5)."""
import time

import numpy as np
import pytest

from mmfedsim.nn import ArchSpec, Conv1D, Dense, Flatten, LossSpec, MaxPool1D, ReLU, backward, forward, init_model
from mmfedsim.nn.losses import (
    cross_entropy_loss_grad,
    kd_loss_grad,
    moon_contrastive_loss_grad,
    supcon_loss_grad,
)

from oracles import central_difference, max_rel_error

TOL = 1e-4
FLOOR = 1e-5


def _layer_cases(rng):
    return [
        (Conv1D(2, 3, 3), (2, 2, 9)),
        (Conv1D(3, 2, 4, 2), (2, 3, 11)),
        (ReLU(), (3, 7)),
        (MaxPool1D(2), (2, 3, 8)),
        (MaxPool1D(3), (1, 2, 10)),
        (Flatten(), (2, 3, 4)),
        (Dense(5, 3), (4, 5)),
    ]


def _check_layer(layer, shape, rng):
    x = rng.normal(size=shape)
    if isinstance(layer, ReLU):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    params = {k: rng.normal(size=s) for k, s in layer.param_shapes().items()}
    y, cache = layer.forward(x, params)
    dy = rng.normal(size=y.shape)
    dx, grads = layer.backward(dy, params, cache)

    def f():
        return float((layer.forward(x, params)[0] * dy).sum())

    errs = [max_rel_error(dx, central_difference(f, x), FLOOR)]
    for k, p in params.items():
        errs.append(max_rel_error(grads[k], central_difference(f, p), FLOOR))
    return max(errs)


def _check_loss(name, rng):
    if name == "ce":
        logits = rng.normal(size=(5, 4)) * 2
        labels = rng.integers(0, 4, size=5)
        _, g = cross_entropy_loss_grad(logits, labels)
        num = central_difference(lambda: cross_entropy_loss_grad(logits, labels)[0], logits)
    elif name == "supcon":
        z = rng.normal(size=(8, 3))
        labels = rng.integers(0, 2, size=8)
        tau = float(rng.uniform(0.1, 1.0))
        _, g = supcon_loss_grad(z, labels, tau)
        num = central_difference(lambda: supcon_loss_grad(z, labels, tau)[0], z)
    elif name in ("kd", "kd_literal"):
        t = rng.normal(size=(4, 3)) * 2
        s = rng.normal(size=(4, 3)) * 2
        tau = float(rng.uniform(0.5, 3.0))
        form = "softened" if name == "kd" else "literal"
        _, g = kd_loss_grad(t, s, tau, form)
        num = central_difference(lambda: kd_loss_grad(t, s, tau, form)[0], s)
    elif name == "moon":
        z, zg, zp = rng.normal(size=(3, 4, 5))
        _, g = moon_contrastive_loss_grad(z, zg, zp, 0.5)
        num = central_difference(lambda: moon_contrastive_loss_grad(z, zg, zp, 0.5)[0], z)
    else:
        raise KeyError(name)
    return max_rel_error(g, num, FLOOR)


def _tiny_arch(rng):
    c = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    conv2 = Conv1D(3, 2, 2, stride)
    length = 12
    shape = (c, length)
    pre = [Conv1D(c, 3, 3), ReLU(), MaxPool1D(2), conv2, ReLU(), Flatten()]
    for layer in pre:
        shape = layer.output_shape(shape)
    layers = tuple(pre) + (Dense(shape[0], 5),)
    return ArchSpec(layers, 5, 3, 3, (c, length))


def _loss_spec(kind, state, x, rng):
    n = x.shape[0]
    spec = LossSpec(ce_weight=1.0)
    if kind in ("supcon", "full"):
        spec.supcon_weight = 1.0
        spec.tau_sc = 0.5
        spec.n_original = n // 2
    if kind in ("kd", "full"):
        rows = spec.n_original or n
        spec.kd_weight = 0.7
        spec.teacher_logits = rng.normal(size=(rows, 3))
        spec.n_original = rows
    if kind in ("prox", "full"):
        spec.prox_mu = 0.3
        spec.prox_anchor = state.replace({k: v + rng.normal(size=v.shape) * 0.1 for k, v in state.params.items()})
    if kind in ("moon", "full"):
        rows = spec.n_original or n
        spec.moon_mu = 0.8
        spec.moon_global = rng.normal(size=(rows, 5))
        spec.moon_previous = rng.normal(size=(rows, 5))
    return spec


def _check_model(kind, rng):
    arch = _tiny_arch(rng)
    state = init_model(arch, rng)
    # zero init biases can leave whole rows dead, where the zero-projection fallback is not differentiable
    state = state.replace({k: v + 0.3 * rng.normal(size=v.shape) if k.endswith("bias") else v
                           for k, v in state.params.items()})
    x = rng.normal(size=(6, *arch.input_shape))
    y = rng.integers(0, 3, size=6)
    if kind in ("supcon", "full"):
        y[3:] = y[:3]
    spec = _loss_spec(kind, state, x, rng)
    _, grad = backward(state, x, y, spec)
    params = {k: np.array(v) for k, v in state.params.items()}

    def f():
        return backward(state.replace(params), x, y, spec)[0]

    return max(max_rel_error(grad[k], central_difference(f, params[k]), FLOOR) for k in params)


def gradient_suite(seed=12345):
    """All randomized instances as (name, relative error) plus elapsed seconds."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = []
    for _ in range(3):
        for layer, shape in _layer_cases(rng):
            results.append((type(layer).__name__, _check_layer(layer, shape, rng)))
    for _ in range(4):
        for name in ("ce", "supcon", "kd", "kd_literal", "moon"):
            results.append((name, _check_loss(name, rng)))
    for _ in range(2):
        for kind in ("ce", "supcon", "kd", "prox", "moon", "full"):
            results.append((f"model:{kind}", _check_model(kind, rng)))
    return results, time.perf_counter() - start


def test_gradient_suite():
    results, elapsed = gradient_suite()
    assert len(results) >= 50
    worst = max(results, key=lambda r: r[1])
    assert worst[1] < TOL, worst
    assert elapsed < 30.0


def test_kd_vanishes_at_incoming_model():
    # before the first step the student equals the teacher: no distillation signal
    rng = np.random.default_rng(0)
    arch = ArchSpec((Dense(3, 4),), 4, 2, 3, (3,))
    state = init_model(arch, rng)
    x = rng.normal(size=(2, 3))
    teacher = forward(state, x).logits
    spec = LossSpec(ce_weight=0.0, kd_weight=1.0, teacher_logits=teacher)
    loss, grad = backward(state, x, np.array([0, 1]), spec)
    assert loss == pytest.approx(0.0, abs=1e-15)
    for g in grad.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-15)
