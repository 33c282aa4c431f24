"""Encoder + projection head + classifier, with a composite-loss backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from ..errors import DimensionError, NumericError
from . import losses
from .layers import Conv1D, Dense, Flatten, Layer, MaxPool1D, ReLU, layer_from_dict, layer_to_dict

Gradient = dict  # name -> ndarray, congruent with ModelState.params


@dataclass(frozen=True)
class ArchSpec:
    """Declarative model description.

    ``layers`` is the encoder; the projection head and classifier are single
    dense layers on top of the ``encoder_output_dim`` embedding.
    ``input_shape`` is ``(channels, length)`` for conv encoders or
    ``(features,)`` for dense-only ones.
    """

    layers: tuple
    encoder_output_dim: int
    projection_dim: int
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.encoder_output_dim <= 0 or self.projection_dim <= 0:
            raise DimensionError("encoder_output_dim and projection_dim must be positive")
        if self.num_classes < 2:
            raise DimensionError("num_classes must be >= 2")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        if shape != (self.encoder_output_dim,):
            raise DimensionError(
                f"encoder output {shape} != encoder_output_dim {self.encoder_output_dim}"
            )

    @classmethod
    def default(
        cls,
        in_channels: int,
        window_len: int,
        num_classes: int,
        d_enc: int = 128,
        d_proj: int = 64,
    ) -> "ArchSpec":
        convs = [
            Conv1D(in_channels, 32, 8, 1),
            ReLU(),
            MaxPool1D(2),
            Conv1D(32, 64, 8, 1),
            ReLU(),
            MaxPool1D(2),
            Flatten(),
        ]
        shape: tuple = (in_channels, window_len)
        for layer in convs:
            shape = layer.output_shape(shape)
        layers = convs + [Dense(shape[0], d_enc)]
        return cls(tuple(layers), d_enc, d_proj, num_classes, (in_channels, window_len))

    def head_layers(self) -> tuple[Dense, Dense]:
        return (
            Dense(self.encoder_output_dim, self.projection_dim),
            Dense(self.encoder_output_dim, self.num_classes),
        )

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            for name, s in layer.param_shapes().items():
                shapes[f"encoder.{i}.{name}"] = s
        proj, cls_ = self.head_layers()
        for prefix, layer in (("projection", proj), ("classifier", cls_)):
            for name, s in layer.param_shapes().items():
                shapes[f"{prefix}.{name}"] = s
        return shapes

    def with_input_channels(self, channels: int) -> "ArchSpec":
        """Same template, first conv (or dense) layer re-sized to ``channels`` inputs."""
        first = self.layers[0]
        if isinstance(first, Conv1D):
            new_first = Conv1D(channels, first.out_channels, first.kernel, first.stride)
            shape = (channels,) + self.input_shape[1:]
        elif isinstance(first, Dense):
            new_first = Dense(channels, first.out_dim)
            shape = (channels,)
        else:
            raise DimensionError("first layer must be Conv1D or Dense")
        return ArchSpec(
            (new_first,) + self.layers[1:],
            self.encoder_output_dim,
            self.projection_dim,
            self.num_classes,
            shape,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [layer_to_dict(layer) for layer in self.layers],
            "encoder_output_dim": self.encoder_output_dim,
            "projection_dim": self.projection_dim,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchSpec":
        return cls(
            tuple(layer_from_dict(x) for x in d["layers"]),
            int(d["encoder_output_dim"]),
            int(d["projection_dim"]),
            int(d["num_classes"]),
            tuple(d["input_shape"]),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)  # always a private copy
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ModelState:
    arch: ArchSpec
    params: dict
    version_tag: int = 0

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if list(shapes) != list(self.params):
            raise DimensionError("parameter names do not match the architecture")
        frozen = {}
        for name, s in shapes.items():
            arr = self.params[name]
            if tuple(np.shape(arr)) != s:
                raise DimensionError(f"{name}: expected {s}, got {np.shape(arr)}")
            frozen[name] = arr if _is_frozen(arr) else _frozen(arr)
        object.__setattr__(self, "params", frozen)

    @property
    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    @property
    def projection_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("projection.")}

    @property
    def classifier_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("classifier.")}

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    @classmethod
    def unflatten(cls, arch: ArchSpec, vector: np.ndarray, version_tag: int = 0) -> "ModelState":
        vector = np.asarray(vector, dtype=np.float64)
        shapes = arch.param_shapes()
        total = sum(int(np.prod(s)) for s in shapes.values())
        if vector.shape != (total,):
            raise DimensionError(f"vector length {vector.shape} != {total}")
        params, offset = {}, 0
        for name, s in shapes.items():
            size = int(np.prod(s))
            params[name] = vector[offset : offset + size].reshape(s)
            offset += size
        return cls(arch, params, version_tag)

    def replace(self, params: dict, version_tag: Optional[int] = None) -> "ModelState":
        return ModelState(
            self.arch, params, self.version_tag if version_tag is None else version_tag
        )


def _is_frozen(a) -> bool:
    return isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable


def init_model(arch: ArchSpec, rng: np.random.Generator) -> ModelState:
    """He-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    params = {}
    layers = list(arch.layers) + list(arch.head_layers())
    names = [f"encoder.{i}" for i in range(len(arch.layers))] + ["projection", "classifier"]
    for prefix, layer in zip(names, layers):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        bound = np.sqrt(6.0 / layer.fan_in())
        params[f"{prefix}.weight"] = rng.uniform(-bound, bound, size=shapes["weight"])
        params[f"{prefix}.bias"] = np.zeros(shapes["bias"])
    return ModelState(arch, params, 0)


def zero_model(arch: ArchSpec) -> ModelState:
    return ModelState(arch, {k: np.zeros(s) for k, s in arch.param_shapes().items()}, 0)


@dataclass
class ForwardResult:
    embeddings: np.ndarray
    projections: np.ndarray
    logits: np.ndarray
    # internals for backward
    caches: list = field(default_factory=list, repr=False)
    raw_projections: Optional[np.ndarray] = field(default=None, repr=False)
    proj_norms: Optional[np.ndarray] = field(default=None, repr=False)


def _layer_params(model: ModelState, prefix: str, layer: Layer) -> dict:
    return {k: model.params[f"{prefix}.{k}"] for k in layer.param_shapes()}


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values in {what}")


def forward(model: ModelState, batch: np.ndarray) -> ForwardResult:
    """Run encoder and both heads; projections are L2-normalized per row.

    A zero projection row stays zero instead of dividing by zero.
    """
    arch = model.arch
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != len(arch.input_shape) + 1 or x.shape[1:] != arch.input_shape:
        raise DimensionError(
            f"batch shape {x.shape} does not match input {arch.input_shape}"
        )
    _check_finite(x, "input batch")
    caches = []
    h = x
    for i, layer in enumerate(arch.layers):
        h, cache = layer.forward(h, _layer_params(model, f"encoder.{i}", layer))
        caches.append(cache)
    _check_finite(h, "embeddings")
    proj, cls_ = arch.head_layers()
    u, _ = proj.forward(h, _layer_params(model, "projection", proj))
    logits, _ = cls_.forward(h, _layer_params(model, "classifier", cls_))
    norms = np.linalg.norm(u, axis=1)
    z = np.divide(u, norms[:, None], out=np.zeros_like(u), where=norms[:, None] > 0)
    _check_finite(logits, "logits")
    _check_finite(z, "projections")
    return ForwardResult(h, z, logits, caches, u, norms)


@dataclass
class LossSpec:
    """Weighted sum of loss terms evaluated on one forward pass.

    ``n_original`` marks the leading rows of the batch that are original
    samples; cross-entropy and distillation only see those rows (unless
    ``ce_on_all_rows``), supervised contrastive sees every row.
    """

    ce_weight: float = 1.0
    supcon_weight: float = 0.0
    kd_weight: float = 0.0
    prox_mu: float = 0.0
    moon_mu: float = 0.0
    tau_sc: float = 0.07
    tau_kd: float = 2.0
    tau_moon: float = 0.5
    kd_form: str = "softened"
    n_original: Optional[int] = None
    ce_on_all_rows: bool = False
    teacher_logits: Optional[np.ndarray] = None
    prox_anchor: Optional[ModelState] = None
    moon_global: Optional[np.ndarray] = None
    moon_previous: Optional[np.ndarray] = None


def composite_loss(model: ModelState, batch, labels, spec: LossSpec):
    """Returns ``(total, terms, forward_result, dlogits, dz, dh)``."""
    out = forward(model, batch)
    labels = np.asarray(labels)
    n = out.logits.shape[0]
    n_orig = n if spec.n_original is None else spec.n_original
    dlogits = np.zeros_like(out.logits)
    dz = np.zeros_like(out.projections)
    dh = np.zeros_like(out.embeddings)
    terms: dict[str, float] = {}
    total = 0.0

    if spec.ce_weight:
        rows = n if spec.ce_on_all_rows else n_orig
        val, g = losses.cross_entropy_loss_grad(out.logits[:rows], labels[:rows])
        terms["ce"] = val
        total += spec.ce_weight * val
        dlogits[:rows] += spec.ce_weight * g
    if spec.supcon_weight:
        val, g = losses.supcon_loss_grad(out.projections, labels, spec.tau_sc)
        terms["supcon"] = val
        total += spec.supcon_weight * val
        dz += spec.supcon_weight * g
    if spec.kd_weight:
        if spec.teacher_logits is None:
            raise ValueError("kd_weight set without teacher_logits")
        val, g = losses.kd_loss_grad(
            spec.teacher_logits, out.logits[:n_orig], spec.tau_kd, spec.kd_form
        )
        terms["kd"] = val
        total += spec.kd_weight * val
        dlogits[:n_orig] += spec.kd_weight * g
    if spec.moon_mu:
        if spec.moon_global is None or spec.moon_previous is None:
            raise ValueError("moon_mu set without reference embeddings")
        val, g = losses.moon_contrastive_loss_grad(
            out.embeddings[:n_orig], spec.moon_global, spec.moon_previous, spec.tau_moon
        )
        terms["moon"] = val
        total += spec.moon_mu * val
        dh[:n_orig] += spec.moon_mu * g
    if spec.prox_mu:
        if spec.prox_anchor is None:
            raise ValueError("prox_mu set without prox_anchor")
        sq = sum(
            float(((w - spec.prox_anchor.params[k]) ** 2).sum())
            for k, w in model.params.items()
        )
        val = 0.5 * spec.prox_mu * sq
        terms["prox"] = val
        total += val
    return total, terms, out, dlogits, dz, dh


def backprop(model: ModelState, out: ForwardResult, dlogits, dz, dh) -> Gradient:
    arch = model.arch
    proj, cls_ = arch.head_layers()
    grads: Gradient = {}
    u, norms, z = out.raw_projections, out.proj_norms, out.projections
    # d(u/|u|)/du applied row-wise; zero rows pass no gradient
    du = np.divide(
        dz - z * (dz * z).sum(axis=1, keepdims=True),
        norms[:, None],
        out=np.zeros_like(dz),
        where=norms[:, None] > 0,
    )
    dh_p, g_p = proj.backward(du, _layer_params(model, "projection", proj), out.embeddings)
    dh_c, g_c = cls_.backward(dlogits, _layer_params(model, "classifier", cls_), out.embeddings)
    dx = dh + dh_p + dh_c
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        dx, g = layer.backward(dx, _layer_params(model, f"encoder.{i}", layer), out.caches[i])
        for k, v in g.items():
            grads[f"encoder.{i}.{k}"] = v
    for k, v in g_p.items():
        grads[f"projection.{k}"] = v
    for k, v in g_c.items():
        grads[f"classifier.{k}"] = v
    return {k: grads[k] for k in model.params}


def backward(model: ModelState, batch, labels, loss_spec: LossSpec) -> tuple[float, Gradient]:
    """Scalar composite loss and its gradient w.r.t. every model parameter."""
    total, _, out, dlogits, dz, dh = composite_loss(model, batch, labels, loss_spec)
    grad = backprop(model, out, dlogits, dz, dh)
    if loss_spec.prox_mu:
        anchor = loss_spec.prox_anchor.params
        for k, w in model.params.items():
            grad[k] = grad[k] + loss_spec.prox_mu * (w - anchor[k])
    return total, grad


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(model: ModelState, grad: Gradient, cfg: OptimizerConfig) -> ModelState:
    """``w - lr * (grad + weight_decay * w)`` for every parameter array."""
    if list(grad) != list(model.params):
        raise DimensionError("gradient does not match model parameters")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    new = {}
    for k, w in model.params.items():
        g = grad[k]
        if g.shape != w.shape:
            raise DimensionError(f"{k}: gradient shape {g.shape} != {w.shape}")
        new[k] = w - lr * (g + wd * w)
    return model.replace(new)
