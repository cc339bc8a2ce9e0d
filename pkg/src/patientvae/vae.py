"""Per-diagnosis variational autoencoder over encoded patient records.

Five layers counting input and output::

    x (D) -> tanh hidden (H) -> latent (L, mu and log-variance heads)
          -> tanh hidden (H) -> raw output (D)

The raw output is split by :class:`~patientvae.records.FeatureLayout`:
softmax over the gender and month groups, sigmoid over each symptom slot and
the age slot. Every probability is squashed affinely into
``[PROB_EPS, 1 - PROB_EPS]`` (``p = eps + (1 - K eps) * softmax`` for a group
of ``K``), which keeps simplex sums exact and the likelihood differentiable.

The prior is ``N(0, I)``; the likelihood factorizes into categorical
(gender, month), Bernoulli (symptoms) and fixed-variance Gaussian (age) terms.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    ModelFormatError,
    NumericError,
    ShapeError,
    TruncatedModelError,
    VersionError,
)
from .numeric import (
    Activation,
    AdamState,
    AffineLayer,
    RandomSource,
    adam_step,
    derive_child_seed,
    mlp_backward,
    mlp_forward,
    sigmoid,
    softmax,
)
from .records import (
    PROB_EPS,
    DataSchema,
    DecodedParams,
    FeatureLayout,
    PatientRecord,
    decode_params,
    encode_records,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOGVAR_CLAMP = 10.0
SNAPSHOT_SIZE = 200
DEFAULT_SNAPSHOT_EPOCHS = (0, 30, 60, 90)


@dataclass
class VaeConfig:
    input_dim: int
    hidden_dim: int = 32
    latent_dim: int = 4
    epochs: int = 90
    batch_size: int = 16
    learning_rate: float = 1e-3
    kl_warmup_epochs: int = 10
    seed: int = 0
    snapshot_epochs: list[int] | None = None
    age_sigma: float = 0.1

    def __post_init__(self):
        if self.snapshot_epochs is None:
            self.snapshot_epochs = [e for e in DEFAULT_SNAPSHOT_EPOCHS if e <= self.epochs]
        else:
            self.snapshot_epochs = sorted({int(e) for e in self.snapshot_epochs})
        self.validate()

    def validate(self) -> None:
        if not (1 <= self.latent_dim < self.input_dim):
            raise ConfigError(f"need 1 <= latent_dim < input_dim, got L={self.latent_dim}, D={self.input_dim}")
        if self.hidden_dim < self.latent_dim:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is smaller than latent_dim {self.latent_dim}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.kl_warmup_epochs < 0:
            raise ConfigError("kl_warmup_epochs must be >= 0")
        if not (self.learning_rate > 0 and self.age_sigma > 0):
            raise ConfigError("learning_rate and age_sigma must be positive")
        if any(e < 0 or e > self.epochs for e in self.snapshot_epochs):
            raise ConfigError(f"snapshot epochs must lie in [0, {self.epochs}]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "VaeConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ModelFormatError(f"malformed config: {exc}") from None


@dataclass
class EncoderParams:
    hidden: AffineLayer
    mu_head: AffineLayer
    logvar_head: AffineLayer


@dataclass
class DecoderParams:
    hidden: AffineLayer
    output: AffineLayer


@dataclass
class GaussianLatent:
    mu: np.ndarray
    logvar: np.ndarray


@dataclass
class VaeModel:
    schema: DataSchema
    config: VaeConfig
    encoder: EncoderParams
    decoder: DecoderParams
    diagnosis: str
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        d = self.layout.total_dim
        cfg = self.config
        expected = {
            "encoder.hidden": (self.encoder.hidden, (cfg.hidden_dim, d)),
            "encoder.mu_head": (self.encoder.mu_head, (cfg.latent_dim, cfg.hidden_dim)),
            "encoder.logvar_head": (self.encoder.logvar_head, (cfg.latent_dim, cfg.hidden_dim)),
            "decoder.hidden": (self.decoder.hidden, (cfg.hidden_dim, cfg.latent_dim)),
            "decoder.output": (self.decoder.output, (d, cfg.hidden_dim)),
        }
        if cfg.input_dim != d:
            raise DimensionError(f"config input_dim {cfg.input_dim} != layout dimension {d}")
        for name, (layer, shape) in expected.items():
            if layer.weights.shape != shape:
                raise DimensionError(f"{name} weights have shape {layer.weights.shape}, expected {shape}")

    @property
    def layout(self) -> FeatureLayout:
        return self.schema.layout

    def layers(self) -> list[AffineLayer]:
        e, d = self.encoder, self.decoder
        return [e.hidden, e.mu_head, e.logvar_head, d.hidden, d.output]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: (weights, bias) for each layer in :meth:`layers` order."""
        out = []
        for layer in self.layers():
            out.extend([layer.weights, layer.bias])
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "VaeModel":
        layers = [
            AffineLayer(np.asarray(params[2 * i]), np.asarray(params[2 * i + 1]), old.activation)
            for i, old in enumerate(self.layers())
        ]
        return VaeModel(
            self.schema,
            self.config,
            EncoderParams(*layers[:3]),
            DecoderParams(*layers[3:]),
            self.diagnosis,
            self.format_version,
        )


def _xavier(rng: RandomSource, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * limit


def init_model(config: VaeConfig, schema: DataSchema, diagnosis: str, rng: RandomSource) -> VaeModel:
    d, h, l = schema.layout.total_dim, config.hidden_dim, config.latent_dim
    if config.input_dim != d:
        raise ConfigError(f"config input_dim {config.input_dim} does not match schema dimension {d}")

    def layer(out, inp, act):
        return AffineLayer(_xavier(rng, out, inp), np.zeros(out), act)

    encoder = EncoderParams(
        layer(h, d, Activation.TANH), layer(l, h, Activation.IDENTITY), layer(l, h, Activation.IDENTITY)
    )
    decoder = DecoderParams(layer(h, l, Activation.TANH), layer(d, h, Activation.IDENTITY))
    return VaeModel(schema, config, encoder, decoder, diagnosis.strip())


# -- forward passes ----------------------------------------------------------------


def _encode(model: VaeModel, x):
    hidden, hcache = mlp_forward([model.encoder.hidden], x)
    mu, mcache = mlp_forward([model.encoder.mu_head], hidden)
    raw_logvar, lcache = mlp_forward([model.encoder.logvar_head], hidden)
    logvar = np.clip(raw_logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return GaussianLatent(mu, logvar), (hcache, mcache, lcache, raw_logvar)


def encoder_forward(model: VaeModel, x) -> GaussianLatent:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.layout.total_dim:
        raise ShapeError(f"feature vector has dimension {x.shape[-1]}, model expects {model.layout.total_dim}")
    latent, _ = _encode(model, x)
    if not (np.all(np.isfinite(latent.mu)) and np.all(np.isfinite(latent.logvar))):
        raise NumericError("encoder produced non-finite output")
    return latent


def reparameterize(latent: GaussianLatent, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != np.shape(latent.mu):
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {np.shape(latent.mu)}")
    return latent.mu + np.exp(0.5 * latent.logvar) * eps


def _squash(raw, layout: FeatureLayout, eps: float = PROB_EPS) -> DecodedParams:
    g = eps + (1.0 - 2 * eps) * softmax(raw[..., layout.gender])
    m = eps + (1.0 - 12 * eps) * softmax(raw[..., layout.month])
    s = eps + (1.0 - 2 * eps) * sigmoid(raw[..., layout.symptoms])
    a = eps + (1.0 - 2 * eps) * sigmoid(raw[..., layout.age])
    return DecodedParams(g, m, s, a)


def _decode(model: VaeModel, z):
    raw, cache = mlp_forward([model.decoder.hidden, model.decoder.output], z)
    return _squash(raw, model.layout), raw, cache


def decoder_forward(model: VaeModel, z) -> DecodedParams:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.config.latent_dim:
        raise ShapeError(f"latent has dimension {z.shape[-1]}, model expects {model.config.latent_dim}")
    params, raw, _ = _decode(model, z)
    if not np.all(np.isfinite(raw)):
        raise NumericError("decoder produced non-finite output")
    return params


# -- loss terms ------------------------------------------------------------------


def _age_constant(age_sigma: float) -> float:
    return math.log(age_sigma * math.sqrt(2.0 * math.pi))


def reconstruction_nll(params: DecodedParams, x, layout: FeatureLayout, age_sigma: float = 0.1):
    """``-log p(x | z)`` under the factorized likelihood; one value per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layout.total_dim:
        raise ShapeError(f"feature vector has dimension {x.shape[-1]}, layout expects {layout.total_dim}")
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    g = np.clip(params.gender_probs, lo, hi)
    m = np.clip(params.month_probs, lo, hi)
    s = np.clip(params.symptom_probs, lo, hi)
    xs = x[..., layout.symptoms]
    nll = -np.sum(x[..., layout.gender] * np.log(g), axis=-1)
    nll = nll - np.sum(x[..., layout.month] * np.log(m), axis=-1)
    nll = nll - np.sum(xs * np.log(s) + (1.0 - xs) * np.log1p(-s), axis=-1)
    resid = x[..., layout.age] - np.asarray(params.age_mean)
    nll = nll + resid**2 / (2.0 * age_sigma**2) + _age_constant(age_sigma)
    return float(nll) if np.ndim(nll) == 0 else nll


def kl_to_standard_normal(latent: GaussianLatent):
    """Closed-form ``KL(N(mu, diag(exp(logvar))) || N(0, I))``, one value per row."""
    mu, lv = np.asarray(latent.mu), np.asarray(latent.logvar)
    kl = 0.5 * np.sum(mu**2 + np.expm1(lv) - lv, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def _raw_output_grad(raw, x, layout: FeatureLayout, age_sigma: float, eps: float = PROB_EPS) -> np.ndarray:
    """d(reconstruction NLL)/d(raw decoder output), per row."""
    grad = np.zeros_like(raw)
    for sl, k in ((layout.gender, 2), (layout.month, 12)):
        s = softmax(raw[..., sl])
        y = x[..., sl]
        c = 1.0 - k * eps
        s_true = np.sum(s * y, axis=-1, keepdims=True)
        p_true = eps + c * s_true
        grad[..., sl] = -(c * s_true / p_true) * (y - s)
    c2 = 1.0 - 2 * eps
    sig = sigmoid(raw[..., layout.symptoms])
    q = eps + c2 * sig
    xs = x[..., layout.symptoms]
    grad[..., layout.symptoms] = (-xs / q + (1.0 - xs) / (1.0 - q)) * c2 * sig * (1.0 - sig)
    sig_a = sigmoid(raw[..., layout.age])
    mean = eps + c2 * sig_a
    grad[..., layout.age] = (mean - x[..., layout.age]) / age_sigma**2 * c2 * sig_a * (1.0 - sig_a)
    return grad


@dataclass
class ElboTerms:
    recon: float
    kl: float
    total: float


def elbo_batch(model: VaeModel, x, eps, beta: float = 1.0, with_grads: bool = True):
    """Mean negative ELBO over a batch and, optionally, its parameter gradients.

    ``x`` is ``(n, D)``, ``eps`` is ``(n, L)``. Gradients follow the
    :meth:`VaeModel.parameters` order.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = x.shape[0]
    latent, (hcache, mcache, lcache, raw_logvar) = _encode(model, x)
    std = np.exp(0.5 * latent.logvar)
    z = latent.mu + std * eps
    params, raw, dcache = _decode(model, z)
    recon = reconstruction_nll(params, x, model.layout, model.config.age_sigma)
    kl = kl_to_standard_normal(latent)
    terms = ElboTerms(float(np.mean(recon)), float(np.mean(kl)), float(np.mean(recon + beta * kl)))
    if not with_grads:
        return terms, None

    draw = _raw_output_grad(raw, x, model.layout, model.config.age_sigma) / n
    dec_grads, dz = mlp_backward([model.decoder.hidden, model.decoder.output], dcache, draw)
    dmu = dz + beta * latent.mu / n
    inside = (raw_logvar > -LOGVAR_CLAMP) & (raw_logvar < LOGVAR_CLAMP)
    dlogvar = (dz * eps * 0.5 * std + beta * 0.5 * np.expm1(latent.logvar) / n) * inside
    mu_grads, dh_mu = mlp_backward([model.encoder.mu_head], mcache, dmu)
    lv_grads, dh_lv = mlp_backward([model.encoder.logvar_head], lcache, dlogvar)
    hid_grads, _ = mlp_backward([model.encoder.hidden], hcache, dh_mu + dh_lv)
    grads = []
    for g in (*hid_grads, *mu_grads, *lv_grads, *dec_grads):
        grads.extend([g.weights, g.bias])
    return terms, grads


def negative_elbo(model: VaeModel, x, eps, beta: float = 1.0) -> tuple[float, float, float]:
    """Single-sample ``(recon, kl, recon + beta * kl)`` for one example (or batch mean)."""
    terms, _ = elbo_batch(model, x, eps, beta, with_grads=False)
    if not math.isfinite(terms.total):
        raise NumericError("negative ELBO is not finite")
    return terms.recon, terms.kl, terms.total


# -- training ------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    recon: float
    kl: float
    total: float
    beta: float
    steps: int


@dataclass
class Snapshot:
    epoch: int
    features: np.ndarray  # (SNAPSHOT_SIZE, D) encoded generations


@dataclass
class TrainingTrace:
    epochs: list[EpochStats] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([e.total for e in self.epochs])


def kl_weight(epoch: int, warmup_epochs: int) -> float:
    """Linear warm-up: 0 in epoch 1, reaching 1 at epoch ``warmup + 1``."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch - 1) / warmup_epochs)


def _snapshot(model: VaeModel, epoch: int) -> Snapshot:
    # Same prior draws at every snapshot epoch so snapshots differ only by the model.
    rng = RandomSource(derive_child_seed(model.config.seed, f"{model.diagnosis}/snapshot"))
    records = generate(model, SNAPSHOT_SIZE, rng, mode="sample")
    return Snapshot(epoch, encode_records(records, model.schema))


def train(
    model: VaeModel,
    records: Sequence[PatientRecord],
    rng: RandomSource,
    config: VaeConfig | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[VaeModel, TrainingTrace]:
    """Minimize the mean negative ELBO with minibatch Adam.

    ``config`` overrides the training hyperparameters stored on the model;
    its architecture fields must agree with the model.
    """
    cfg = config or model.config
    if (cfg.input_dim, cfg.hidden_dim, cfg.latent_dim) != (
        model.config.input_dim,
        model.config.hidden_dim,
        model.config.latent_dim,
    ):
        raise ConfigError("training config architecture does not match the model")
    if not records:
        raise ValueError("cannot train on zero records")
    foreign = {r.diagnosis.strip() for r in records} - {model.diagnosis}
    if foreign:
        raise ValueError(f"records include diagnoses {sorted(foreign)} but model is for {model.diagnosis!r}")

    model = model.with_parameters([p.copy() for p in model.parameters()])
    model.config = cfg
    x_all = encode_records(records, model.schema)
    n, latent_dim = x_all.shape[0], cfg.latent_dim
    params = model.parameters()
    state = AdamState.zeros_like(params, learning_rate=cfg.learning_rate)
    trace = TrainingTrace()
    if 0 in cfg.snapshot_epochs:
        trace.snapshots.append(_snapshot(model, 0))

    for epoch in range(1, cfg.epochs + 1):
        beta = kl_weight(epoch, cfg.kl_warmup_epochs)
        order = rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            eps = rng.standard_normal((len(idx), latent_dim))
            with np.errstate(over="ignore", invalid="ignore"):
                terms, grads = elbo_batch(model, x_all[idx], eps, beta)
            if not (math.isfinite(terms.total) and all(np.all(np.isfinite(g)) for g in grads)):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            sums += len(idx) * np.array([terms.recon, terms.kl, terms.total])
            params, state = adam_step(params, grads, state)
            model = model.with_parameters(params)
            steps += 1
        recon, kl, total = sums / n
        stats = EpochStats(epoch, float(recon), float(kl), float(total), beta, steps)
        trace.epochs.append(stats)
        log.info("epoch %d: recon %.4f kl %.4f total %.4f (beta %.2f)", epoch, recon, kl, total, beta)
        if on_epoch is not None:
            on_epoch(stats)
        if epoch in cfg.snapshot_epochs:
            trace.snapshots.append(_snapshot(model, epoch))
    return model, trace


def generate(model: VaeModel, n: int, rng: RandomSource, mode: str = "sample") -> list[PatientRecord]:
    """Decode ``n`` prior draws ``z ~ N(0, I)`` into records.

    All latent draws are taken first, then per-record decode draws.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    z = rng.standard_normal((n, model.config.latent_dim))
    params = decoder_forward(model, z)
    return [decode_params(params[i], model.schema, mode, rng, model.diagnosis) for i in range(n)]


# -- persistence ------------------------------------------------------------------------


def _layer_to_json(layer: AffineLayer) -> dict:
    rows, cols = layer.weights.shape
    return {
        "activation": layer.activation.value,
        "weights": {"rows": rows, "cols": cols, "entries": layer.weights.reshape(-1).tolist()},
        "bias": layer.bias.tolist(),
    }


def _layer_from_json(obj: dict, name: str) -> AffineLayer:
    try:
        w = obj["weights"]
        rows, cols, entries = int(w["rows"]), int(w["cols"]), w["entries"]
        bias = obj["bias"]
        activation = Activation(obj["activation"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed layer {name}: {exc}") from None
    if len(entries) != rows * cols:
        raise DimensionError(f"{name}: {len(entries)} weight entries for a {rows}x{cols} matrix")
    if len(bias) != rows:
        raise DimensionError(f"{name}: bias length {len(bias)} != rows {rows}")
    try:
        weights = np.array(entries, dtype=np.float64).reshape(rows, cols)
        bias_arr = np.array(bias, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{name}: non-numeric weights ({exc})") from None
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias_arr))):
        raise ModelFormatError(f"{name}: non-finite weights")
    return AffineLayer(weights, bias_arr, activation)


def model_to_json(model: VaeModel) -> dict:
    return {
        "format_version": model.format_version,
        "diagnosis": model.diagnosis,
        "schema": model.schema.to_json(),
        "config": model.config.to_json(),
        "encoder": {
            "hidden": _layer_to_json(model.encoder.hidden),
            "mu_head": _layer_to_json(model.encoder.mu_head),
            "logvar_head": _layer_to_json(model.encoder.logvar_head),
        },
        "decoder": {
            "hidden": _layer_to_json(model.decoder.hidden),
            "output": _layer_to_json(model.decoder.output),
        },
    }


def model_from_json(obj: dict) -> VaeModel:
    if not isinstance(obj, dict) or "format_version" not in obj:
        raise ModelFormatError("not a model document: missing format_version")
    if obj["format_version"] != FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {obj['format_version']!r}")
    try:
        schema = DataSchema.from_json(obj["schema"])
        config = VaeConfig.from_json(dict(obj["config"]))
        enc, dec = obj["encoder"], obj["decoder"]
        encoder = EncoderParams(
            _layer_from_json(enc["hidden"], "encoder.hidden"),
            _layer_from_json(enc["mu_head"], "encoder.mu_head"),
            _layer_from_json(enc["logvar_head"], "encoder.logvar_head"),
        )
        decoder = DecoderParams(
            _layer_from_json(dec["hidden"], "decoder.hidden"),
            _layer_from_json(dec["output"], "decoder.output"),
        )
        diagnosis = str(obj["diagnosis"])
    except KeyError as exc:
        raise ModelFormatError(f"model document missing field {exc}") from None
    except ShapeError as exc:
        raise DimensionError(str(exc)) from None
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(str(exc)) from None
    return VaeModel(schema, config, encoder, decoder, diagnosis)


def save_model(model: VaeModel, destination: str | os.PathLike | None = None) -> bytes:
    """Serialize to JSON bytes (floats round-trip exactly); write them if a path is given."""
    data = (json.dumps(model_to_json(model), indent=1) + "\n").encode("utf-8")
    if destination is not None:
        with open(destination, "wb") as fh:
            fh.write(data)
    return data


def load_model(source: bytes | str | os.PathLike) -> VaeModel:
    """Load from serialized bytes, or from a file path."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedModelError(f"model file is truncated or not JSON: {exc}") from None
    return model_from_json(obj)
