"""Finite-difference gradient checks for every differentiable op and loss.

``REGISTRY`` maps a check name to a builder ``rng -> (fn, inputs)`` where
``fn()`` returns a scalar Tensor computed from ``inputs``. ``check`` compares
the backpropagated gradient with central differences on a sample of
coordinates of every input.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from canonkit import tensor as T
from canonkit.canon import (
    CanonConfig,
    gumbel_select,
    orbit_embeddings,
    orbit_separation_loss,
    prior_loss_delta,
    prior_loss_kl,
    st_select,
)
from canonkit.nets import NetSpec, backbone_spec, forward, gcnn_spec, init_params, predictor_forward
from canonkit.symmetry import GroupElement, act_image, make_group
from canonkit.tensor import Tensor

STEP = 1e-3
TOLERANCE = 1e-4
MAX_COORDS = 24

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, margin: float = 0.0) -> Tensor:
    a = rng.standard_normal(shape)
    if margin:
        # keep entries away from zero so kinks stay out of the difference stencil
        a = a + np.where(a >= 0, margin, -margin)
    return Tensor(a, requires_grad=True)


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _probe(out: Tensor, w: Tensor) -> Tensor:
    return T.sum(T.mul(out, w))


def _b_linear(rng):
    W, b, x = _leaf(rng, (3, 4)), _leaf(rng, (3,)), _leaf(rng, (4,))
    w = _weights(rng, (3,))
    return (lambda: _probe(T.linear(W, b, x), w)), [W, b, x]


def _b_conv2d(rng):
    K, x, b = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (2, 3, 5, 5)), _leaf(rng, (2,))
    w = _weights(rng, (2, 2, 5, 5))
    return (lambda: _probe(T.conv2d(K, x, b), w)), [K, x, b]


def _b_relu(rng):
    x = _leaf(rng, (4, 5), margin=0.05)
    w = _weights(rng, (4, 5))
    return (lambda: _probe(T.relu(x), w)), [x]


def _b_pool(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    w = _weights(rng, (2, 3))
    return (lambda: _probe(T.global_mean_pool(x), w)), [x]


def _b_softmax(rng):
    z = _leaf(rng, (3, 5))
    w = _weights(rng, (3, 5))
    return (lambda: _probe(T.softmax(z, 0.7), w)), [z]


def _b_cross_entropy(rng):
    z = _leaf(rng, (4, 3))
    y = rng.integers(0, 3, size=4)
    return (lambda: T.cross_entropy(T.softmax(z), y)), [z]


def _b_log_exp(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(6,)), requires_grad=True)
    w = _weights(rng, (6,))
    return (lambda: _probe(T.exp(T.log(x)), w) + _probe(T.log(x), w)), [x]


def _b_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 2))
    w = _weights(rng, (2, 3, 2))
    return (lambda: _probe(T.matmul(a, b), w)), [a, b]


def _b_dot(rng):
    a, v = _leaf(rng, (2, 3, 4)), _leaf(rng, (4,))
    w = _weights(rng, (2, 3))
    return (lambda: _probe(T.dot(a, v), w)), [a, v]


def _b_l2_normalize(rng):
    x = _leaf(rng, (3, 5))
    w = _weights(rng, (3, 5))
    return (lambda: _probe(T.l2_normalize(x), w)), [x]


def _b_structural(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (2, 3, 3))
    bias = _leaf(rng, (3,))
    w = _weights(rng, (3, 2, 3))
    idx = np.array([2, 0, 1, 1])

    def fn():
        s = T.stack([a, T.mul(a, b), T.sub(b, a)], axis=0)  # [3, 2, 3, 3]
        s = T.swapaxes(T.take(s, (slice(None), slice(None), 1)), 1, 2)  # [3, 3, 2]
        s = T.reshape(s, (3, 2, 3))
        s = T.add(s, bias)
        return _probe(s, w) + T.sum(T.take(T.reshape(a, (-1,)), idx)) + T.mean(T.scale(b, 2.5))

    return fn, [a, b, bias]


def _b_act_image(rng):
    x = _leaf(rng, (2, 4, 4))
    w = _weights(rng, (2, 4, 4))
    g = GroupElement(3, 1)
    return (lambda: _probe(act_image(g, x), w)), [x]


def _jittered(spec: NetSpec, rng) -> "T.Parameters":
    params = init_params(spec, int(rng.integers(1 << 30)))
    for t in params.values():
        # nonzero biases keep pre-activations off the relu kink at exactly 0
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return params


def _net_check(spec: NetSpec, rng, shape_out):
    params = _jittered(spec, rng)
    x = _leaf(rng, (2, spec.in_channels, spec.image_size, spec.image_size))
    w = _weights(rng, shape_out)
    return (lambda: _probe(forward(params, spec, x), w)), [x] + [params[k] for k in params]


def _b_small_cnn(rng):
    spec = backbone_spec(widths=(3, 4), embed_dim=5, image_size=6)
    return _net_check(spec, rng, (2, 5))


def _b_mlp(rng):
    spec = NetSpec(arch="mlp", widths=(7,), embed_dim=3, image_size=4)
    return _net_check(spec, rng, (2, 3))


def _b_dense_head(rng):
    spec = NetSpec(arch="small_cnn", widths=(3,), head="dense", out_channels=2, image_size=5)
    return _net_check(spec, rng, (2, 2, 5, 5))


def _b_gcnn(rng):
    spec = gcnn_spec("c4", widths=(2, 3), image_size=5)
    return _net_check(spec, rng, (2, 4))


def _canon_setup(rng, group="c4", d=6):
    spec = backbone_spec(widths=(3, 4), embed_dim=d, image_size=6)
    params = _jittered(spec, rng)
    cfg = CanonConfig(embed_dim=d, tau=0.8, vref_seed=int(rng.integers(1 << 30)))
    x = rng.random((3, 1, 6, 6))
    return spec, params, cfg, x, make_group(group)


def _b_orbit_separation(rng):
    spec, params, cfg, x, group = _canon_setup(rng)
    return (lambda: orbit_separation_loss(params, spec, x, group, cfg)), [params[k] for k in params]


def _b_prior_delta(rng):
    spec, params, cfg, x, group = _canon_setup(rng, "d4")
    return (lambda: prior_loss_delta(params, spec, x, group, cfg)), [params[k] for k in params]


def _b_prior_kl(rng):
    z = _leaf(rng, (3, 4))
    prior = np.array([0.5, 0.2, 0.3, 0.0])
    return (lambda: prior_loss_kl(prior, T.softmax(z))), [z]


def _b_st_select(rng):
    """Straight-through: the backpropagated gradient w.r.t. backbone weights
    equals the finite-difference gradient of the soft surrogate
    ``<dL/dy|hard, sum_g p_g(theta) orbit_g>``."""
    spec, params, cfg, x, group = _canon_setup(rng)
    pspec = NetSpec(arch="small_cnn", widths=(3,), head="logits", num_classes=3, image_size=6)
    pparams = _jittered(pspec, rng)
    y = rng.integers(0, 3, size=len(x))

    orbits, _, e = orbit_embeddings(params, spec, x, group, cfg)
    sel = np.argmax(e.data, axis=-1)
    hard = Tensor(orbits[np.arange(len(x)), sel], requires_grad=True)
    T.cross_entropy(T.softmax(predictor_forward(pparams, pspec, hard)), y).backward()
    upstream = hard.grad.copy()
    theta = [params[k] for k in params]

    coef = Tensor(np.einsum("ngchw,nchw->ng", orbits, upstream))

    def soft():
        _, _, en = orbit_embeddings(params, spec, x, group, cfg)
        return T.sum(T.mul(T.softmax(en), coef))

    def ad_grads():
        for t in theta:
            t.grad = None
        _, _, en = orbit_embeddings(params, spec, x, group, cfg)
        probs = T.softmax(en)
        out = st_select(probs, orbits, sel)
        loss = T.cross_entropy(T.softmax(predictor_forward(pparams, pspec, out)), y)
        loss.backward()
        return [t.grad.copy() for t in theta]

    return soft, theta, ad_grads


def _b_gumbel_select(rng):
    """Gumbel straight-through with frozen noise: gradient w.r.t. the logits
    equals that of the tempered soft mixture."""
    z = _leaf(rng, (2, 4))
    orbits = rng.standard_normal((2, 4, 1, 3, 3))
    w = _weights(rng, (2, 1, 3, 3))
    seed = int(rng.integers(1 << 30))

    def soft():
        probs = T.softmax(z)
        u = np.random.default_rng(seed).uniform(np.finfo(np.float64).tiny, 1.0, size=probs.shape)
        q = T.softmax(T.add(T.log(probs), Tensor(-np.log(-np.log(u)))), 0.5)
        coef = np.einsum("ngchw,nchw->ng", orbits, w.data)
        return T.sum(T.mul(q, Tensor(coef)))

    def ad_grads():
        z.grad = None
        out, _ = gumbel_select(T.softmax(z), orbits, 0.5, np.random.default_rng(seed))
        _probe(out, w).backward()
        return [z.grad.copy()]

    return soft, [z], ad_grads


REGISTRY: dict[str, Builder] = {
    "linear": _b_linear,
    "conv2d": _b_conv2d,
    "relu": _b_relu,
    "global_mean_pool": _b_pool,
    "softmax": _b_softmax,
    "cross_entropy": _b_cross_entropy,
    "log_exp": _b_log_exp,
    "matmul": _b_matmul,
    "dot": _b_dot,
    "l2_normalize": _b_l2_normalize,
    "structural": _b_structural,
    "act_image": _b_act_image,
    "net_small_cnn": _b_small_cnn,
    "net_mlp": _b_mlp,
    "net_dense_head": _b_dense_head,
    "net_gcnn": _b_gcnn,
    "loss_orbit_separation": _b_orbit_separation,
    "loss_prior_delta": _b_prior_delta,
    "loss_prior_kl": _b_prior_kl,
    "st_select": _b_st_select,
    "gumbel_select": _b_gumbel_select,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


# Composite checks whose ReLU activation pattern is pinned during the
# difference evaluations. A step of 1e-3 on one weight moves many
# pre-activations at once and some cross zero; pinning the pattern at the base
# point differentiates the active linear piece, which is what backprop returns.
PIECEWISE = frozenset({
    "net_small_cnn", "net_mlp", "net_dense_head", "net_gcnn",
    "loss_orbit_separation", "loss_prior_delta", "st_select",
})


@contextmanager
def _pinned_relu(fn):
    masks: list[np.ndarray] = []
    cursor = [None]
    orig = T.relu

    def relu(x):
        if cursor[0] is None:
            masks.append(x.data > 0)
            m = masks[-1]
        else:
            m = masks[cursor[0]]
            cursor[0] += 1
        return T._make(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,), "relu")

    def replay():
        cursor[0] = 0
        return fn()

    T.relu = relu
    try:
        fn()
        yield replay
    finally:
        T.relu = orig


@contextmanager
def _plain(fn):
    yield fn


def check(builder: Builder, seed: int = 0, name: str = "") -> CheckResult:
    rng = np.random.default_rng(seed)
    built = builder(rng)
    fn, inputs = built[0], built[1]
    if len(built) == 3:
        analytic = built[2]()
    else:
        for t in inputs:
            t.grad = None
        fn().backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    with (_pinned_relu if name in PIECEWISE else _plain)(fn) as fd_fn:
        worst = _compare(fd_fn, inputs, analytic, rng)
    return CheckResult(name, worst)


def _compare(fn, inputs, analytic, rng) -> float:
    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(MAX_COORDS, flat.size), replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + STEP
            up = fn().item()
            flat[c] = orig - STEP
            down = fn().item()
            flat[c] = orig
            num[j] = (up - down) / (2 * STEP)
        a = ana.reshape(-1)[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst


def run_all(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    names = only or list(REGISTRY)
    return [check(REGISTRY[n], seed, n) for n in names]
