"""Network architectures built on the tensor core.

Three families:

* ``mlp`` and ``small_cnn``: plain, non-equivariant networks. Used both as the
  canonicalization backbone (``head="embed"``) and as the prediction network
  (``head="logits"`` or ``head="dense"``).
* ``gcnn``: a lifting layer plus one group convolution over C4 or D4, pooled
  to one logit per group element. Transforming the input by ``g`` permutes
  its logits by left translation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from canonkit import tensor as T
from canonkit.errors import ConfigError, DimensionError
from canonkit.symmetry import Group, act_image, make_group
from canonkit.tensor import Parameters, Tensor

ARCHS = ("mlp", "small_cnn", "gcnn")
HEADS = ("embed", "logits", "dense")


@dataclass
class NetSpec:
    arch: str = "small_cnn"
    widths: tuple[int, ...] = (16, 32, 32)
    embed_dim: int = 128
    head: str = "embed"
    num_classes: int = 4
    out_channels: int = 1
    in_channels: int = 1
    image_size: int = 16
    kernel_size: int = 3
    group: str | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.arch == "gcnn":
            if self.group not in ("c4", "d4"):
                raise ConfigError(f"gcnn needs group 'c4' or 'd4', got {self.group!r}")
            if len(self.widths) != 2:
                raise ConfigError("gcnn widths are (lifting channels, group-conv channels)")
        if self.arch == "mlp" and self.head == "dense":
            raise ConfigError("mlp has no dense head")

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.head == "embed" else self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetSpec:
        return cls(**d)


def backbone_spec(**kw) -> NetSpec:
    """Default canonicalization network: three 3x3 conv layers, pooled, linear to 128."""
    return NetSpec(**{"arch": "small_cnn", "widths": (16, 32, 32), "head": "embed", **kw})


def predictor_spec(**kw) -> NetSpec:
    """Default prediction network: a wider four-layer CNN."""
    return NetSpec(**{"arch": "small_cnn", "widths": (32, 32, 64, 64), "head": "logits", **kw})


def gcnn_spec(group: str = "c4", **kw) -> NetSpec:
    return NetSpec(**{"arch": "gcnn", "widths": (16, 32), "head": "logits", "group": group, **kw})


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def param_shapes(spec: NetSpec) -> dict[str, tuple[tuple[int, ...], int]]:
    """Map parameter name -> (shape, fan_in); fan_in 0 marks a bias."""
    k = spec.kernel_size
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    if spec.arch == "gcnn":
        n = len(make_group(spec.group))
        c1, c2 = spec.widths
        shapes["lift.weight"] = ((c1, spec.in_channels, k, k), spec.in_channels * k * k)
        shapes["lift.bias"] = ((c1,), 0)
        shapes["gconv.weight"] = ((c2, c1, n, k, k), c1 * n * k * k)
        shapes["gconv.bias"] = ((c2,), 0)
        shapes["head.weight"] = ((c2,), c2)
        shapes["head.bias"] = ((1,), 0)
        return shapes
    if spec.arch == "mlp":
        fan = spec.in_channels * spec.image_size ** 2
        for i, w in enumerate(spec.widths):
            shapes[f"fc{i}.weight"] = ((w, fan), fan)
            shapes[f"fc{i}.bias"] = ((w,), 0)
            fan = w
        shapes["out.weight"] = ((spec.out_dim, fan), fan)
        shapes["out.bias"] = ((spec.out_dim,), 0)
        return shapes
    cin = spec.in_channels
    for i, w in enumerate(spec.widths):
        shapes[f"conv{i}.weight"] = ((w, cin, k, k), cin * k * k)
        shapes[f"conv{i}.bias"] = ((w,), 0)
        cin = w
    if spec.head == "dense":
        shapes["out.weight"] = ((spec.out_channels, cin, k, k), cin * k * k)
        shapes["out.bias"] = ((spec.out_channels,), 0)
    else:
        shapes["out.weight"] = ((spec.out_dim, cin), cin)
        shapes["out.bias"] = ((spec.out_dim,), 0)
    return shapes


def init_params(spec: NetSpec, seed: int = 0, checkpoint: str | Path | None = None,
                prefix: str = "") -> Parameters:
    """He-normal weights and zero biases, drawn in lexicographic name order.

    With ``checkpoint`` the weights are read from a saved file instead (the
    entries under ``prefix``), e.g. to start from a pretrained backbone.
    """
    shapes = param_shapes(spec)
    if checkpoint is not None:
        from canonkit.checkpoint import load_checkpoint

        tensors, _ = load_checkpoint(checkpoint)
        params = Parameters()
        for name, (shape, _) in shapes.items():
            arr = tensors.get(prefix + name)
            if arr is None or arr.shape != shape:
                raise DimensionError(f"checkpoint entry {prefix + name!r} missing or not shaped {shape}")
            params[name] = Tensor(arr.copy())
        return params
    rng = np.random.default_rng(seed)
    params = Parameters()
    for name in sorted(shapes):
        shape, fan_in = shapes[name]
        if fan_in == 0:
            params[name] = Tensor(np.zeros(shape))
        else:
            params[name] = Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
    return params


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


def _check_input(spec: NetSpec, x: Tensor) -> None:
    want = (spec.in_channels, spec.image_size, spec.image_size)
    if x.ndim not in (3, 4) or x.shape[-3:] != want:
        raise DimensionError(f"{spec.arch} expects input [..., {want}], got {x.shape}")


def _conv_stack(params: Parameters, spec: NetSpec, x: Tensor) -> Tensor:
    h = x
    for i in range(len(spec.widths)):
        h = T.relu(T.conv2d(params[f"conv{i}.weight"], h, params[f"conv{i}.bias"]))
    return h


def forward(params: Parameters, spec: NetSpec, x) -> Tensor:
    """Run any non-group network; ``x`` is ``[C, H, W]`` or ``[N, C, H, W]``."""
    x = T.as_tensor(x)
    _check_input(spec, x)
    if spec.arch == "gcnn":
        return gcnn_forward(params, spec, x)
    if spec.arch == "mlp":
        single = x.ndim == 3
        h = T.reshape(x, (1 if single else x.shape[0], -1))
        for i in range(len(spec.widths)):
            h = T.relu(T.linear(params[f"fc{i}.weight"], params[f"fc{i}.bias"], h))
        out = T.linear(params["out.weight"], params["out.bias"], h)
        return T.reshape(out, (spec.out_dim,)) if single else out
    h = _conv_stack(params, spec, x)
    if spec.head == "dense":
        return T.conv2d(params["out.weight"], h, params["out.bias"])
    return T.linear(params["out.weight"], params["out.bias"], T.global_mean_pool(h))


def backbone_forward(params: Parameters, spec: NetSpec, x) -> Tensor:
    """Embedding ``[d]`` (or ``[N, d]``) from the canonicalization backbone."""
    if spec.head != "embed":
        raise ConfigError(f"backbone needs head='embed', got {spec.head!r}")
    return forward(params, spec, x)


def predictor_forward(params: Parameters, spec: NetSpec, x) -> Tensor:
    """Class logits or a dense ``[C', H, W]`` map, depending on ``spec.head``."""
    if spec.head == "embed":
        raise ConfigError("predictor needs head='logits' or 'dense'")
    return forward(params, spec, x)


def _lift_kernel(K: Tensor, group: Group) -> Tensor:
    # [c1, inC, k, k] -> [c1 * |G|, inC, k, k], channel order (out, element)
    c1, cin, k, _ = K.shape
    rotated = T.stack([act_image(g, K) for g in group], axis=1)
    return T.reshape(rotated, (c1 * len(group), cin, k, k))


def _group_kernel(W: Tensor, group: Group) -> Tensor:
    # [c2, c1, |G|, k, k] -> [c2 * |G|, c1 * |G|, k, k]; for output element g
    # the filter is act(g, W[:, :, index(g^-1 h)]) over input elements h
    c2, c1, n, k, _ = W.shape
    per_elem = [act_image(g, T.take(W, (slice(None), slice(None), group.left_translation(g))))
                for g in group]
    return T.reshape(T.stack(per_elem, axis=1), (c2 * n, c1 * n, k, k))


def gcnn_forward(params: Parameters, spec: NetSpec, x, group: Group | None = None) -> Tensor:
    """Per-group-element logits ``[|G|]`` (or ``[N, |G|]``)."""
    if spec.arch != "gcnn":
        raise ConfigError(f"gcnn_forward needs arch='gcnn', got {spec.arch!r}")
    group = group or make_group(spec.group)
    if group.name != spec.group:
        raise ConfigError(f"gcnn built for {spec.group}, called with {group.name}")
    x = T.as_tensor(x)
    _check_input(spec, x)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    n = len(group)
    c1, c2 = spec.widths
    lift_b = T.take(params["lift.bias"], np.repeat(np.arange(c1), n))
    h = T.relu(T.conv2d(_lift_kernel(params["lift.weight"], group), x, lift_b))
    gconv_b = T.take(params["gconv.bias"], np.repeat(np.arange(c2), n))
    h = T.relu(T.conv2d(_group_kernel(params["gconv.weight"], group), h, gconv_b))
    pooled = T.reshape(T.global_mean_pool(h), (x.shape[0], c2, n))
    logits = T.dot(T.swapaxes(pooled, 1, 2), params["head.weight"])
    logits = T.add(logits, T.take(params["head.bias"], np.zeros(n, dtype=np.int64)))
    return T.reshape(logits, (n,)) if single else logits
