"""Small classifier networks, the gradient-reversal hook and the dual-model
ensemble rule, plus bit-exact text checkpoints.

A classifier is a ReLU MLP feature extractor, an affine head and a learnable
softmax temperature parameterized as ``T = exp(theta)`` so it stays positive.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (Array, ParamSet, Tensor, affine, as_tensor, softmax_t)
from .numerics import grl  # re-exported: reversal layer used by the DANN baseline

__all__ = [
    "ClassifierModel", "DomainDiscriminator", "DualState",
    "init_model", "forward", "forward_logits", "grl",
    "predict_labels", "ensemble_predict", "clone_model",
    "init_discriminator", "discriminator_logits",
    "save_checkpoint", "load_checkpoint", "CKPT_MAGIC",
]

LOG_TEMPERATURE = "log_temperature"


@dataclass
class ClassifierModel:
    """Feature extractor + classifier head + learnable temperature.

    ``widths`` are the extractor layer sizes (last entry is the feature
    dimension); an empty tuple means the extractor is the identity.
    """

    input_dim: int
    widths: tuple[int, ...]
    num_classes: int
    params: ParamSet

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] if self.widths else self.input_dim

    def temperature(self) -> float:
        return float(np.exp(self.params[LOG_TEMPERATURE].data[0]))


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(input_dim: int, widths, num_classes: int, seed) -> ClassifierModel:
    """Fresh model: weights uniform in +-1/sqrt(fan_in), zero biases, T = 1."""
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ValueError("widths must be non-empty")
    if any(w < 1 for w in widths):
        raise ValueError("widths must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")

    rng = np.random.default_rng(seed)
    params = ParamSet()
    fan_in = input_dim
    for i, w in enumerate(widths):
        params.add(f"ext.w{i}", _uniform_fan_in(rng, fan_in, (fan_in, w)))
        params.add(f"ext.b{i}", np.zeros(w))
        fan_in = w
    params.add("head.w", _uniform_fan_in(rng, fan_in, (fan_in, num_classes)))
    params.add("head.b", np.zeros(num_classes))
    params.add(LOG_TEMPERATURE, np.zeros(1))
    return ClassifierModel(input_dim, widths, num_classes, params)


def clone_model(model: ClassifierModel) -> ClassifierModel:
    """Deep copy with fresh optimizer state."""
    return ClassifierModel(model.input_dim, model.widths, model.num_classes,
                           model.params.clone())


def extract_features(model: ClassifierModel, x) -> Tensor:
    """Run the ReLU extractor stack; identity when there are no layers."""
    h = as_tensor(x)
    if h.data.ndim != 2 or h.data.shape[1] != model.input_dim:
        raise ValueError(
            f"expected input of shape [B x {model.input_dim}], got {h.data.shape}")
    p = model.params
    for i in range(len(model.widths)):
        h = affine(h, p[f"ext.w{i}"], p[f"ext.b{i}"]).relu()
    return h


def forward_logits(model: ClassifierModel, x) -> tuple[Tensor, Tensor]:
    """(features, head logits) as graph tensors."""
    feats = extract_features(model, x)
    logits = affine(feats, model.params["head.w"], model.params["head.b"])
    return feats, logits


def forward(model: ClassifierModel, x) -> tuple[Tensor, Tensor]:
    """(features, class probabilities at T = 1).

    The learnable temperature is applied only inside self-penalization,
    which computes its own tempered softmax from the logits.
    """
    feats, logits = forward_logits(model, x)
    return feats, softmax_t(logits, 1.0)


def predict_probs(model: ClassifierModel, x) -> Array:
    """Probabilities at T = 1 as a plain array (no graph kept)."""
    return forward(model, x)[1].data


def predict_labels(model: ClassifierModel, x) -> Array:
    """Argmax labels; ties break toward the lower class index."""
    return np.argmax(predict_probs(model, x), axis=1)


def ensemble_predict(sdm: ClassifierModel, tdm: ClassifierModel, x) -> Array:
    """Argmax of the summed softmax outputs of both models (low-index ties)."""
    if sdm.num_classes != tdm.num_classes:
        raise ValueError(
            f"models disagree on class count: {sdm.num_classes} vs {tdm.num_classes}")
    summed = predict_probs(sdm, x) + predict_probs(tdm, x)
    return np.argmax(summed, axis=1)


@dataclass
class DomainDiscriminator:
    """Features -> 2 domain logits (source vs target) behind a reversal layer."""

    feature_dim: int
    hidden: int
    params: ParamSet
    grl_lambda: float = 1.0


def init_discriminator(feature_dim: int, hidden: int, seed,
                       grl_lambda: float = 1.0) -> DomainDiscriminator:
    rng = np.random.default_rng(seed)
    params = ParamSet()
    params.add("disc.w0", _uniform_fan_in(rng, feature_dim, (feature_dim, hidden)))
    params.add("disc.b0", np.zeros(hidden))
    params.add("disc.w1", _uniform_fan_in(rng, hidden, (hidden, 2)))
    params.add("disc.b1", np.zeros(2))
    return DomainDiscriminator(feature_dim, hidden, params, grl_lambda)


def discriminator_logits(disc: DomainDiscriminator, features: Tensor) -> Tensor:
    p = disc.params
    h = affine(features, p["disc.w0"], p["disc.b0"]).relu()
    return affine(h, p["disc.w1"], p["disc.b1"])


@dataclass
class DualState:
    """The trained pair of models plus bookkeeping from the run.

    ``threshold_trace`` rows are (epoch, iteration, tau_sd, tau_td,
    n_above_sd, n_above_td), one per training iteration.
    """

    sdm: ClassifierModel
    tdm: ClassifierModel
    epoch: int = 0
    threshold_trace: list[tuple[int, int, float, float, int, int]] = field(
        default_factory=list)


# ---------------------------------------------------------------------------
# Checkpoint format (bit-exact text):
#   line 1: "FIXBI-CKPT v1"
#   per tensor: "name <name> shape <s1,s2,...>" then one line of
#   space-separated shortest round-trip decimals.
# ---------------------------------------------------------------------------

CKPT_MAGIC = "FIXBI-CKPT v1"


def save_checkpoint(model: ClassifierModel, path) -> None:
    lines = [CKPT_MAGIC]
    for name, t in model.params.items():
        dims = ",".join(str(s) for s in t.data.shape)
        lines.append(f"name {name} shape {dims}")
        lines.append(" ".join(repr(float(v)) for v in t.data.reshape(-1)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ClassifierModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"not a {CKPT_MAGIC} checkpoint: {path}")

    tensors: dict[str, Array] = {}
    order: list[str] = []
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 4 or head[0] != "name" or head[2] != "shape":
            raise ValueError(f"bad tensor header at line {i + 1}: {lines[i]!r}")
        name = head[1]
        shape = tuple(int(s) for s in head[3].split(","))
        if i + 1 >= len(lines):
            raise ValueError(f"missing values for tensor {name!r}")
        values = np.array([float(v) for v in lines[i + 1].split()])
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise ValueError(
                f"tensor {name!r}: expected {expected} values, got {values.size}")
        if name in tensors:
            raise ValueError(f"duplicate tensor {name!r}")
        tensors[name] = values.reshape(shape)
        order.append(name)
        i += 2

    for required in ("head.w", "head.b", LOG_TEMPERATURE):
        if required not in tensors:
            raise ValueError(f"checkpoint missing tensor {required!r}")

    widths = []
    k = 0
    while f"ext.w{k}" in tensors:
        widths.append(tensors[f"ext.w{k}"].shape[1])
        k += 1
    input_dim = tensors["ext.w0"].shape[0] if widths else tensors["head.w"].shape[0]
    num_classes = tensors["head.w"].shape[1]

    params = ParamSet()
    for name in order:
        params.add(name, tensors[name])
    return ClassifierModel(input_dim, tuple(widths), num_classes, params)
