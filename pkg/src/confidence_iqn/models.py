"""
Models

The two-convolution CNN backbone, the classifier head, and the two loss
estimators that re-use the trained backbone:

    ClassifierModel  psi(x) -> log p(y|x)
    IqnModel         (psi(x), tau) -> Z_tau(x), the tau-quantile of the classifier's loss
    ScalarModel      psi(x) -> a single loss estimate

Tau embedding: phi_j(tau) = ReLU(sum_i cos(pi * i * tau) * w_ij + b_j) for i in 0..63,
fused with the backbone features by elementwise product before the head.
"""

import logging
from typing import Any

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, DimensionError, ParameterError
from .tensor_core import Parameter, Rng, Tensor

logger = logging.getLogger(__name__)

FEATURE_WIDTH = 128
DROPOUT_CONV = 0.25
DROPOUT_FC = 0.50
N_BASIS = 64


# ── Layers ───────────────────────────────────────────────────────────


class Module:
    """Container of named parameters and sub-modules, in attribute order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        params: dict[str, Parameter] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                params[prefix + attr] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{attr}."))
        return params

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], *, strict: bool = True) -> None:
        params = self.named_parameters()
        if strict and set(state) != set(params):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise ContractError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, array in state.items():
            if name not in params:
                continue
            target = params[name]
            if target.shape != array.shape:
                raise ContractError(f"{name}: checkpoint shape {array.shape} != parameter shape {target.shape}")
            target.data = np.array(array, dtype=target.dtype)


def _uniform_init(rng: Rng, fan_in: int, shape: tuple[int, ...], name: str) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, shape).astype(tc.default_dtype()), name=name)


class Linear(Module):
    """y = x @ weight + bias, weight stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: Rng):
        self.weight = _uniform_init(rng, in_features, (in_features, out_features), "weight")
        self.bias = _uniform_init(rng, in_features, (out_features,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.add_bias(tc.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: Rng):
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform_init(rng, fan_in, (out_channels, in_channels, kernel, kernel), "weight")
        self.bias = _uniform_init(rng, fan_in, (out_channels,), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return tc.add_bias(tc.conv2d(x, self.weight), self.bias)


# ── Backbone and heads ───────────────────────────────────────────────


class Backbone(Module):
    """
    conv3x3(in->32) -> relu -> conv3x3(32->64) -> relu -> maxpool2 -> dropout(0.25)
    -> flatten -> fc(->128) -> relu -> dropout(0.50), producing psi(x).
    """

    def __init__(
        self,
        input_shape: tuple[int, int, int],
        rng: Rng,
        *,
        dropout_enabled: bool = True,
    ):
        in_channels, height, width = input_shape
        if height < 6 or width < 6:
            raise DimensionError(f"backbone needs images of at least 6x6, got {input_shape}")
        self.input_shape = tuple(input_shape)
        self.dropout_enabled = dropout_enabled
        self.conv1 = Conv2d(in_channels, 32, 3, rng.child("conv1"))
        self.conv2 = Conv2d(32, 64, 3, rng.child("conv2"))
        flat = 64 * ((height - 4) // 2) * ((width - 4) // 2)
        self.fc1 = Linear(flat, FEATURE_WIDTH, rng.child("fc1"))

    @property
    def dropout_rates(self) -> tuple[float, float]:
        return (DROPOUT_CONV, DROPOUT_FC) if self.dropout_enabled else (0.0, 0.0)

    def __call__(self, images: Tensor, *, training: bool, rng: Rng | None = None) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise DimensionError(f"backbone expects n x {self.input_shape}, got {images.shape}")
        conv_rate, fc_rate = self.dropout_rates
        x = tc.relu(self.conv1(images))
        x = tc.relu(self.conv2(x))
        x = tc.max_pool2d(x, 2)
        x = tc.dropout(x, conv_rate, training=training, rng=rng)
        x = tc.relu(self.fc1(tc.flatten(x)))
        return tc.dropout(x, fc_rate, training=training, rng=rng)


class ClassifierModel(Module):
    def __init__(self, input_shape, num_classes: int, rng: Rng, *, dropout_enabled: bool = True):
        self.num_classes = num_classes
        self.backbone = Backbone(input_shape, rng.child("backbone"), dropout_enabled=dropout_enabled)
        self.fc2 = Linear(FEATURE_WIDTH, num_classes, rng.child("fc2"))

    def __call__(self, images: Tensor, *, training: bool, rng: Rng | None = None) -> Tensor:
        return tc.log_softmax(self.fc2(self.backbone(images, training=training, rng=rng)))


def cosine_features(taus: np.ndarray, n_basis: int = N_BASIS) -> np.ndarray:
    """cos(pi * i * tau) for i = 0..n_basis-1; rows follow the flattened taus."""
    taus = np.asarray(taus, dtype=np.float64).reshape(-1, 1)
    return np.cos(np.pi * np.arange(n_basis, dtype=np.float64) * taus)


class TauEmbedding(Module):
    def __init__(self, rng: Rng, n_basis: int = N_BASIS, width: int = FEATURE_WIDTH):
        self.n_basis = n_basis
        self.linear = Linear(n_basis, width, rng)

    def __call__(self, taus: np.ndarray) -> Tensor:
        features = cosine_features(taus, self.n_basis).astype(self.linear.weight.dtype)
        return tc.relu(self.linear(tc.constant(features)))


def _check_taus(taus: np.ndarray) -> np.ndarray:
    taus = np.asarray(taus)
    if taus.ndim != 2:
        raise DimensionError(f"taus must be batch x K, got shape {taus.shape}")
    if taus.size and (not np.all(np.isfinite(taus)) or taus.min() < 0.0 or taus.max() > 1.0):
        raise ParameterError("every tau must lie in [0, 1]")
    return taus


class IqnModel(Module):
    """Backbone + cosine tau embedding + linear head; Z_tau(x) = head(psi(x) * phi(tau))."""

    def __init__(self, input_shape, rng: Rng, *, dropout_enabled: bool = True, n_basis: int = N_BASIS):
        self.backbone = Backbone(input_shape, rng.child("backbone"), dropout_enabled=dropout_enabled)
        self.tau_embedding = TauEmbedding(rng.child("tau_embedding"), n_basis)
        self.head = Linear(FEATURE_WIDTH, 1, rng.child("head"))

    def quantiles(self, features: Tensor, taus: np.ndarray) -> Tensor:
        """Z for every (example, tau) pair given precomputed backbone features."""
        taus = _check_taus(taus)
        batch, k = taus.shape
        if features.shape != (batch, FEATURE_WIDTH):
            raise DimensionError(f"features {features.shape} do not match taus {taus.shape}")
        fused = tc.elementwise_mul(tc.tile_rows(features, k), self.tau_embedding(taus))
        return tc.reshape(self.head(fused), (batch, k))

    def __call__(
        self, images: Tensor, taus: np.ndarray, *, training: bool, rng: Rng | None = None
    ) -> Tensor:
        taus = _check_taus(taus)
        if taus.shape[0] != images.shape[0]:
            raise DimensionError(f"taus {taus.shape} do not match batch of images {images.shape}")
        return self.quantiles(self.backbone(images, training=training, rng=rng), taus)


class ScalarModel(Module):
    def __init__(self, input_shape, rng: Rng, *, dropout_enabled: bool = True):
        self.backbone = Backbone(input_shape, rng.child("backbone"), dropout_enabled=dropout_enabled)
        self.head = Linear(FEATURE_WIDTH, 1, rng.child("head"))

    def __call__(self, images: Tensor, *, training: bool, rng: Rng | None = None) -> Tensor:
        return self.head(self.backbone(images, training=training, rng=rng))


# ── Operations ───────────────────────────────────────────────────────


def classifier_forward(
    model: ClassifierModel, images: Tensor, training: bool, rng: Rng | None = None
) -> Tensor:
    """Per-class log-probabilities; dropout is active iff `training`."""
    return model(images, training=training, rng=rng)


def iqn_forward(
    model: IqnModel, images: Tensor, taus: np.ndarray, training: bool, rng: Rng | None = None
) -> Tensor:
    """Entry (b, k) is Z_{taus[b, k]}(images[b])."""
    return model(images, taus, training=training, rng=rng)


def transfer_weights(classifier: ClassifierModel, target: IqnModel | ScalarModel) -> None:
    """
    Copy the trained backbone into a freshly built estimator.

    The estimator's tau embedding and head keep their fresh initialization and
    the classifier is left untouched (values are copied, never shared).
    """
    source = classifier.backbone.named_parameters()
    destination = target.backbone.named_parameters()
    if classifier.backbone.input_shape != target.backbone.input_shape or set(source) != set(destination):
        raise ContractError(
            f"backbone architectures differ: {classifier.backbone.input_shape} vs {target.backbone.input_shape}"
        )
    for name, param in source.items():
        if destination[name].shape != param.shape:
            raise ContractError(f"backbone.{name}: {param.shape} vs {destination[name].shape}")
    target.backbone.load_state_dict({name: p.data.copy() for name, p in source.items()})
    logger.debug("transferred %d backbone tensors", len(source))


# ── Metadata ─────────────────────────────────────────────────────────


def describe(model: Module) -> dict[str, Any]:
    """Hyperparameters written next to a checkpoint."""
    backbone: Backbone = model.backbone
    meta: dict[str, Any] = {
        "kind": {ClassifierModel: "classifier", IqnModel: "iqn", ScalarModel: "scalar"}[type(model)],
        "input_shape": list(backbone.input_shape),
        "dropout_enabled": backbone.dropout_enabled,
        "dropout_rates": list(backbone.dropout_rates),
        "feature_width": FEATURE_WIDTH,
        "parameters": {name: list(p.shape) for name, p in model.named_parameters().items()},
    }
    if isinstance(model, ClassifierModel):
        meta["num_classes"] = model.num_classes
    if isinstance(model, IqnModel):
        meta["n_basis"] = model.tau_embedding.n_basis
    return meta


def build_from_metadata(meta: dict[str, Any], rng: Rng | None = None) -> Module:
    """Rebuild an (untrained) model from `describe` output, ready for load_state_dict."""
    rng = rng or Rng(0)
    shape = tuple(meta["input_shape"])
    dropout_enabled = meta["dropout_enabled"]
    kind = meta["kind"]
    if kind == "classifier":
        return ClassifierModel(shape, meta["num_classes"], rng, dropout_enabled=dropout_enabled)
    if kind == "iqn":
        return IqnModel(shape, rng, dropout_enabled=dropout_enabled, n_basis=meta.get("n_basis", N_BASIS))
    if kind == "scalar":
        return ScalarModel(shape, rng, dropout_enabled=dropout_enabled)
    raise ContractError(f"unknown model kind {kind!r}")
