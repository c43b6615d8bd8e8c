"""Encoder-decoder backbone with parallel classification and uncertainty heads.

The backbone is a GRU-GRU block: the encoder consumes the observed snippet
features, the decoder unrolls one step per anticipation snippet and emits a
future feature at each step.  Two parallel linear heads act on every
anticipated feature: one produces class logits, the other a per-class
uncertainty vector whose pooled scalar serves as a softmax temperature.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "AnticipationWindow", "BackboneOutput", "UncertaintyEstimate",
    "DualHeadOutput", "GruBackbone", "AnticipationModel",
    "dual_heads", "mc_dropout_forward",
    "save_checkpoint", "load_checkpoint",
    "U_FLOOR", "U_CEILING",
]

U_FLOOR = 0.1
U_CEILING = 10.0

_CKPT_MAGIC = b"UBANCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class AnticipationWindow:
    """Timing geometry of one training sample, in seconds and snippets."""

    tau_o: float
    tau_a: float
    delta: float

    def __post_init__(self):
        for name in ("tau_o", "tau_a"):
            ratio = getattr(self, name) / self.delta
            if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
                raise ValueError(
                    f"{name}={getattr(self, name)} is not a positive multiple "
                    f"of delta={self.delta}")

    @property
    def n_o(self):
        return int(round(self.tau_o / self.delta))

    @property
    def n_a(self):
        return int(round(self.tau_a / self.delta))

    def anticipation_taus(self):
        """tau_a of each decoder step, largest horizon first."""
        return [(self.n_a - k) * self.delta for k in range(self.n_a)]


@dataclass
class BackboneOutput:
    anticipated: list[Tensor]      # one (B, d) feature tensor per step
    hidden_trace: list[np.ndarray] = field(default_factory=list)


@dataclass
class UncertaintyEstimate:
    vector: Tensor                 # (B, C), strictly positive
    scalar: Tensor                 # (B, 1), pooled and clamped
    pooling: str


@dataclass
class DualHeadOutput:
    logits: Tensor                 # (B, C)
    uncertainty: UncertaintyEstimate


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_gru(rng, d_in, d_h, prefix):
    params = {}
    for gate in ("z", "r", "n"):
        params[f"{prefix}.W{gate}"] = _uniform_init(rng, (d_in, d_h), d_in)
        params[f"{prefix}.U{gate}"] = _uniform_init(rng, (d_h, d_h), d_h)
        params[f"{prefix}.b{gate}"] = Tensor(np.zeros((1, d_h)), requires_grad=True)
    return params


def _gru_step(params, prefix, x, h):
    z = ad.sigmoid(ad.matmul(x, params[f"{prefix}.Wz"])
                   + ad.matmul(h, params[f"{prefix}.Uz"]) + params[f"{prefix}.bz"])
    r = ad.sigmoid(ad.matmul(x, params[f"{prefix}.Wr"])
                   + ad.matmul(h, params[f"{prefix}.Ur"]) + params[f"{prefix}.br"])
    n = ad.tanh(ad.matmul(x, params[f"{prefix}.Wn"])
                + ad.matmul(r * h, params[f"{prefix}.Un"]) + params[f"{prefix}.bn"])
    one = Tensor(1.0)
    return (one - z) * n + z * h


class GruBackbone:
    """GRU encoder + GRU decoder emitting one future feature per step.

    Any object with the same `anticipate(observed, n_a)` signature and a
    `params` dict can substitute for this backbone.
    """

    def __init__(self, feature_dim, hidden_dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.params = {}
        self.params.update(_init_gru(rng, feature_dim, hidden_dim, "enc"))
        self.params.update(_init_gru(rng, feature_dim, hidden_dim, "dec"))
        self.params["dec.Wout"] = _uniform_init(rng, (hidden_dim, feature_dim), hidden_dim)
        self.params["dec.bout"] = Tensor(np.zeros((1, feature_dim)), requires_grad=True)

    def anticipate(self, observed, n_a, keep_trace=False):
        """observed: (B, n_o, d) array or list of (B, d) tensors."""
        if isinstance(observed, np.ndarray):
            if observed.ndim != 3 or observed.shape[2] != self.feature_dim:
                raise ad.ShapeMismatch(
                    f"backbone expects (B, n_o, {self.feature_dim}), got {observed.shape}")
            steps = [Tensor(observed[:, t, :]) for t in range(observed.shape[1])]
        else:
            steps = list(observed)
        if not steps:
            raise ad.ShapeMismatch("backbone needs at least one observed snippet")

        B = steps[0].data.shape[0]
        h = Tensor(np.zeros((B, self.hidden_dim)))
        for x in steps:
            h = _gru_step(self.params, "enc", x, h)

        trace = []
        anticipated = []
        x = steps[-1]
        for _ in range(n_a):
            h = _gru_step(self.params, "dec", x, h)
            feat = ad.matmul(h, self.params["dec.Wout"]) + self.params["dec.bout"]
            anticipated.append(feat)
            x = feat
            if keep_trace:
                trace.append(h.data.copy())
        return BackboneOutput(anticipated=anticipated, hidden_trace=trace)


def _init_heads(rng, feature_dim, num_classes):
    return {
        "head.Wc": _uniform_init(rng, (feature_dim, num_classes), feature_dim),
        "head.bc": Tensor(np.zeros((1, num_classes)), requires_grad=True),
        "head.Wu": _uniform_init(rng, (feature_dim, num_classes), feature_dim),
        "head.bu": Tensor(np.zeros((1, num_classes)), requires_grad=True),
    }


def dual_heads(feature, params, pooling="mean", u_floor=U_FLOOR, u_ceiling=U_CEILING):
    """Apply both heads to an anticipated feature tensor of shape (B, d).

    The uncertainty vector is softplus(raw) + u_floor, so it is strictly
    positive; the pooled scalar is clamped to [u_floor, u_ceiling] before it
    is used as a temperature.
    """
    logits = ad.matmul(feature, params["head.Wc"]) + params["head.bc"]
    raw = ad.matmul(feature, params["head.Wu"]) + params["head.bu"]
    vector = ad.softplus(raw) + Tensor(u_floor)
    if pooling == "mean":
        pooled = ad.tensor_mean(vector, axis=1, keepdims=True)
    elif pooling == "max":
        pooled = ad.reduce_max(vector, axis=1, keepdims=True)
    elif pooling == "min":
        pooled = ad.reduce_min(vector, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    scalar = ad.clip(pooled, u_floor, u_ceiling)
    return DualHeadOutput(
        logits=logits,
        uncertainty=UncertaintyEstimate(vector=vector, scalar=scalar, pooling=pooling))


class AnticipationModel:
    """Backbone plus heads, with a flat named-parameter view for the optimizer."""

    def __init__(self, feature_dim, hidden_dim, num_classes, pooling="mean", seed=0,
                 backbone=None):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.num_classes = num_classes
        self.pooling = pooling
        self.backbone = backbone if backbone is not None else GruBackbone(
            feature_dim, hidden_dim, rng)
        self.head_params = _init_heads(rng, feature_dim, num_classes)

    @property
    def params(self):
        merged = dict(self.backbone.params)
        merged.update(self.head_params)
        return merged

    def forward(self, observed, n_a):
        """Run backbone and heads; one DualHeadOutput per anticipation step."""
        out = self.backbone.anticipate(observed, n_a)
        heads = [dual_heads(f, self.head_params, self.pooling) for f in out.anticipated]
        return out, heads

    def predict(self, observed, n_a):
        """Temperature-adjusted probabilities and pooled uncertainties (numpy)."""
        _, heads = self.forward(observed, n_a)
        probs, unc = [], []
        for h in heads:
            adjusted = ad.softmax(h.logits / h.uncertainty.scalar, axis=1)
            probs.append(adjusted.data)
            unc.append(h.uncertainty.scalar.data[:, 0])
        return np.stack(probs, axis=1), np.stack(unc, axis=1)  # (B, n_a, C), (B, n_a)


def mc_dropout_forward(model, observed, n_a, passes, drop_rate, seed=0):
    """Repeat the forward pass with Bernoulli masks on the anticipated features.

    Returns the per-pass adjusted probabilities, their mean, and a mutual-
    information style model-uncertainty estimate: entropy of the mean
    distribution minus the mean per-pass entropy, averaged over steps.
    """
    if passes < 2:
        raise ValueError("passes must be >= 2")
    if not 0.0 < drop_rate < 1.0:
        raise ValueError("drop_rate must be in (0, 1)")
    rng = np.random.default_rng(seed)
    keep = 1.0 - drop_rate
    all_probs = []
    for _ in range(passes):
        out = model.backbone.anticipate(observed, n_a)
        step_probs = []
        for feat in out.anticipated:
            mask = (rng.random(feat.data.shape) < keep) / keep
            dropped = feat * Tensor(mask)
            head = dual_heads(dropped, model.head_params, model.pooling)
            adjusted = ad.softmax(head.logits / head.uncertainty.scalar, axis=1)
            step_probs.append(adjusted.data)
        all_probs.append(np.stack(step_probs, axis=1))
    all_probs = np.stack(all_probs, axis=0)  # (passes, B, n_a, C)

    mean_probs = all_probs.mean(axis=0)
    eps = 1e-12
    entropy_of_mean = -(mean_probs * np.log(mean_probs + eps)).sum(axis=-1)
    mean_of_entropy = -(all_probs * np.log(all_probs + eps)).sum(axis=-1).mean(axis=0)
    model_uncertainty = float((entropy_of_mean - mean_of_entropy).mean())
    return {
        "per_pass_probs": all_probs,
        "mean_probs": mean_probs,
        "model_uncertainty": model_uncertainty,
    }


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON meta, then named float64 blocks

def save_checkpoint(path, model, meta=None):
    meta = dict(meta or {})
    meta.update({
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "pooling": model.pooling,
    })
    params = model.params
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, meta); the parameter round-trip is bit-exact."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n_items), dtype="<f8").reshape(shape)
            params[name] = np.array(data)

    model = AnticipationModel(meta["feature_dim"], meta["hidden_dim"],
                              meta["num_classes"], pooling=meta["pooling"])
    own = model.params
    if set(own) != set(params):
        raise ValueError(f"{path}: parameter names {sorted(params)} do not match "
                         f"model layout {sorted(own)}")
    for name, data in params.items():
        if own[name].data.shape != data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: checkpoint "
                             f"{data.shape} vs model {own[name].data.shape}")
        own[name].data = data
    return model, meta
