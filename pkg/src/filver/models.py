"""Encoder variants, the classifier head, and their training losses.

Three encoder kinds share one trunk architecture:

  random_projection  frozen at initialization, never trained
  ebr                deterministic embedding head, trained on a classification probe
  vee                two heads (mu, log sigma); embeddings are reparameterized draws

The conv trunk is two 5x5 convolutions with ReLU, each followed by 2x2 max
pooling, then two dense layers; the mlp trunk is the two dense layers alone.
Classifiers are plain ReLU MLPs over the embedding space.  Parameters live in
ParamVectors; the model objects here hold only architecture, so forward and
backward calls stay pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractViolation
from .numcore import Gradient, ParamVector, Segment
from .rng import RngStream

DEFAULT_EMBED_DIM = 256
DEFAULT_HIDDEN = 1000
DEFAULT_BETA = 1e-3
DEFAULT_PRETRAIN_EPOCHS = 5


@dataclass
class EncoderSpec:
    kind: str  # random_projection | ebr | vee
    input_dims: tuple  # (H, W) image shape or (n,) flat
    embed_dim: int = DEFAULT_EMBED_DIM
    arch: str = "conv"  # conv | mlp
    hidden: int = DEFAULT_HIDDEN
    conv_channels: tuple = (16, 32)

    def __post_init__(self):
        if self.kind not in ("random_projection", "ebr", "vee"):
            raise ContractViolation(f"unknown encoder kind {self.kind!r}")
        if self.arch not in ("conv", "mlp"):
            raise ContractViolation(f"unknown encoder arch {self.arch!r}")
        if self.embed_dim <= 0:
            raise ContractViolation("embed_dim must be positive")
        self.input_dims = tuple(int(v) for v in self.input_dims)


@dataclass
class ClassifierSpec:
    classes: int
    hidden: int = DEFAULT_HIDDEN
    layers: int = 2

    def __post_init__(self):
        if self.layers < 1:
            raise ContractViolation("classifier needs at least one hidden layer")
        if self.classes < 2:
            raise ContractViolation("classifier needs at least two classes")


@dataclass
class GaussianStats:
    """Per-example embedding statistics (mu, log sigma); rows are examples."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ContractViolation("mu and log_sigma shapes differ")

    def row(self, i: int) -> "GaussianStats":
        return GaussianStats(self.mu[i].copy(), self.log_sigma[i].copy())


@dataclass
class VerLossConfig:
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ContractViolation("beta must be finite and non-negative")


# ---------------------------------------------------------------------------
# Layer stack
# ---------------------------------------------------------------------------


class _Dense:
    def __init__(self, name, n_in, n_out, activation):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation

    def init_arrays(self, rng: RngStream):
        # He init for ReLU layers, Xavier-ish for linear heads
        scale = np.sqrt(2.0 / self.n_in) if self.activation == "relu" else np.sqrt(1.0 / self.n_in)
        w = rng.normal((self.n_in, self.n_out)) * scale
        b = np.zeros(self.n_out)
        return [(f"{self.name}.w", w), (f"{self.name}.b", b)]

    def forward(self, params, x):
        return nc.dense_forward(x, params.get(f"{self.name}.w"), params.get(f"{self.name}.b"),
                                self.activation)

    def backward(self, params, cache, dout, grads):
        dx, dw, db = nc.dense_backward(cache, dout)
        grads[f"{self.name}.w"] = dw
        grads[f"{self.name}.b"] = db
        return dx


class _Conv:
    def __init__(self, name, c_in, c_out, kernel=5):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel

    def init_arrays(self, rng: RngStream):
        fan_in = self.kernel * self.kernel * self.c_in
        k = rng.normal((self.kernel, self.kernel, self.c_in, self.c_out)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(self.c_out)
        return [(f"{self.name}.k", k), (f"{self.name}.b", b)]

    def forward(self, params, x):
        return nc.conv2d_forward(x, params.get(f"{self.name}.k"), params.get(f"{self.name}.b"),
                                 "relu")

    def backward(self, params, cache, dout, grads):
        dx, dk, db = nc.conv2d_backward(cache, dout)
        grads[f"{self.name}.k"] = dk
        grads[f"{self.name}.b"] = db
        return dx


class _Pool:
    def __init__(self, name):
        self.name = name

    def init_arrays(self, rng):
        return []

    def forward(self, params, x):
        return nc.maxpool2x2(x)

    def backward(self, params, cache, dout, grads):
        return nc.maxpool2x2_backward(cache, dout)


class _Flatten:
    def __init__(self, name):
        self.name = name

    def init_arrays(self, rng):
        return []

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout, grads):
        return dout.reshape(cache)


def _stack_forward(layers, params, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(params, x)
        caches.append(cache)
    return x, caches


def _stack_backward(layers, params, caches, dout, grads):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dout = layer.backward(params, cache, dout, grads)
    return dout


def _grads_to_vector(template: ParamVector, grads: dict) -> Gradient:
    return ParamVector(
        [Segment(s.name, grads.get(s.name, np.zeros_like(s.values))) for s in template.segments]
    )


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class EncoderModel:
    """Architecture object for one encoder spec; parameters are passed per call."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        if spec.arch == "conv":
            if len(spec.input_dims) not in (2, 3):
                raise ContractViolation("conv arch expects (H, W) or (H, W, C) input dims")
            h, w = spec.input_dims[0], spec.input_dims[1]
            c_in = spec.input_dims[2] if len(spec.input_dims) == 3 else 1
            c1, c2 = spec.conv_channels
            h1, w1 = (h - 4) // 2, (w - 4) // 2
            h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
            if h2 < 1 or w2 < 1:
                raise ContractViolation(f"input {h}x{w} too small for two 5x5 conv stages")
            self.trunk = [
                _Conv("conv1", c_in, c1),
                _Pool("pool1"),
                _Conv("conv2", c1, c2),
                _Pool("pool2"),
                _Flatten("flatten"),
                _Dense("fc1", h2 * w2 * c2, spec.hidden, "relu"),
                _Dense("fc2", spec.hidden, spec.hidden, "relu"),
            ]
        else:
            if len(spec.input_dims) != 1:
                raise ContractViolation("mlp arch expects flat (n,) input dims")
            n = spec.input_dims[0]
            self.trunk = [
                _Dense("fc1", n, spec.hidden, "relu"),
                _Dense("fc2", spec.hidden, spec.hidden, "relu"),
            ]
        if spec.kind == "vee":
            self.heads = [
                _Dense("mu", spec.hidden, spec.embed_dim, "identity"),
                _Dense("log_sigma", spec.hidden, spec.embed_dim, "identity"),
            ]
        else:
            self.heads = [_Dense("embed", spec.hidden, spec.embed_dim, "identity")]

    def init_params(self, rng: RngStream) -> ParamVector:
        pairs = []
        for layer in self.trunk + self.heads:
            pairs.extend(layer.init_arrays(rng.child("layer", layer.name)))
        return ParamVector.from_arrays(pairs)

    def _prepare_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.spec.arch == "conv":
            if x.ndim == 3:  # (B, H, W) grayscale
                x = x[..., None]
            if x.ndim != 4:
                raise ContractViolation(f"conv encoder expects image batch, got {x.shape}")
        else:
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
        return x

    def trunk_forward(self, params, x):
        return _stack_forward(self.trunk, params, self._prepare_input(x))

    def stats_forward(self, params, x):
        """VEE heads: (mu, log_sigma, caches). log_sigma is clamped to its band."""
        if self.spec.kind != "vee":
            raise ContractViolation("stats_forward requires a vee encoder")
        h, trunk_caches = self.trunk_forward(params, x)
        mu, mu_cache = self.heads[0].forward(params, h)
        log_sigma_raw, ls_cache = self.heads[1].forward(params, h)
        log_sigma = np.clip(log_sigma_raw, -nc.LOG_SIGMA_MAX, nc.LOG_SIGMA_MAX)
        clip_mask = (log_sigma_raw > -nc.LOG_SIGMA_MAX) & (log_sigma_raw < nc.LOG_SIGMA_MAX)
        return mu, log_sigma, (trunk_caches, mu_cache, ls_cache, clip_mask)

    def stats_backward(self, params, caches, d_mu, d_log_sigma) -> Gradient:
        trunk_caches, mu_cache, ls_cache, clip_mask = caches
        grads: dict = {}
        dh = self.heads[0].backward(params, mu_cache, d_mu, grads)
        dh = dh + self.heads[1].backward(params, ls_cache, d_log_sigma * clip_mask, grads)
        _stack_backward(self.trunk, params, trunk_caches, dh, grads)
        return _grads_to_vector(params, grads)

    def embed_forward(self, params, x):
        """Deterministic head output: (z, caches)."""
        if self.spec.kind == "vee":
            raise ContractViolation("embed_forward requires a deterministic encoder")
        h, trunk_caches = self.trunk_forward(params, x)
        z, head_cache = self.heads[0].forward(params, h)
        return z, (trunk_caches, head_cache)

    def embed_backward(self, params, caches, dz) -> Gradient:
        trunk_caches, head_cache = caches
        grads: dict = {}
        dh = self.heads[0].backward(params, head_cache, dz, grads)
        _stack_backward(self.trunk, params, trunk_caches, dh, grads)
        return _grads_to_vector(params, grads)


def encode_deterministic(encoder: EncoderModel, params: ParamVector, x) -> np.ndarray:
    """Embeddings of a deterministic (random_projection or ebr) encoder."""
    z, _ = encoder.embed_forward(params, x)
    return z


def encode_variational(encoder: EncoderModel, params: ParamVector, x, rng: RngStream):
    """VEE forward: per-example stats plus one reparameterized draw.

    Stats are a deterministic function of (params, x); only the draw consumes
    randomness.  Returns (stats, z, eps).
    """
    mu, log_sigma, _ = encoder.stats_forward(params, x)
    stats = GaussianStats(mu, log_sigma)
    z, eps = nc.reparam_sample(mu, log_sigma, rng)
    return stats, z, eps


def encode_for_eval(encoder: EncoderModel, params: ParamVector, x) -> np.ndarray:
    """Noise-free embeddings for evaluation: mu for vee, head output otherwise."""
    if encoder.spec.kind == "vee":
        mu, _, _ = encoder.stats_forward(params, x)
        return mu
    return encode_deterministic(encoder, params, x)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------


class ClassifierModel:
    def __init__(self, spec: ClassifierSpec, embed_dim: int):
        self.spec = spec
        self.embed_dim = embed_dim
        layers = []
        n_in = embed_dim
        for i in range(spec.layers):
            layers.append(_Dense(f"cls{i + 1}", n_in, spec.hidden, "relu"))
            n_in = spec.hidden
        layers.append(_Dense("cls_out", n_in, spec.classes, "identity"))
        self.layers = layers

    def init_params(self, rng: RngStream) -> ParamVector:
        pairs = []
        for layer in self.layers:
            pairs.extend(layer.init_arrays(rng.child("layer", layer.name)))
        return ParamVector.from_arrays(pairs)

    def forward(self, params, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.embed_dim:
            raise ContractViolation(
                f"classify: embedding dim {z.shape[1]} != expected {self.embed_dim}"
            )
        return _stack_forward(self.layers, params, z)

    def backward(self, params, caches, dlogits):
        grads: dict = {}
        dz = _stack_backward(self.layers, params, caches, dlogits, grads)
        return _grads_to_vector(params, grads), dz


def classify(classifier: ClassifierModel, params: ParamVector, z) -> np.ndarray:
    logits, _ = classifier.forward(params, z)
    return logits


def classifier_loss_and_grad(classifier: ClassifierModel, params: ParamVector, z, labels):
    """Cross-entropy on embeddings: (loss, param gradient).  The local and
    server training steps both reduce to this once the encoder is frozen."""
    logits, caches = classifier.forward(params, z)
    loss, dlogits = nc.softmax_cross_entropy(logits, labels)
    grads, _ = classifier.backward(params, caches, dlogits)
    return loss, grads


def classifier_accuracy(classifier: ClassifierModel, params: ParamVector, z, labels) -> float:
    logits, _ = classifier.forward(params, z)
    return float((nc.predictions(logits) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# Composite loss: cross-entropy of a sampled embedding plus beta * KL
# ---------------------------------------------------------------------------


@dataclass
class VerLossResult:
    loss: float
    ce: float
    kl: float
    d_mu: np.ndarray
    d_log_sigma: np.ndarray
    classifier_grad: Gradient


def ver_loss(stats: GaussianStats, z, eps, labels, classifier: ClassifierModel,
             classifier_params: ParamVector, cfg: VerLossConfig) -> VerLossResult:
    """loss = CE(classify(z), y) + beta * KL(stats || N(0, I)), batch-mean.

    z must be the reparameterized draw mu + sigma * eps for the given stats;
    gradients reach mu and log_sigma through both the CE term (via eps) and
    the KL term.
    """
    logits, caches = classifier.forward(classifier_params, z)
    ce, dlogits = nc.softmax_cross_entropy(logits, labels)
    clf_grads, dz = classifier.backward(classifier_params, caches, dlogits)
    kl, dmu_kl, dls_kl = nc.gaussian_kl_batch(stats.mu, stats.log_sigma)
    sigma = nc.sigma_from_log(stats.log_sigma)
    d_mu = dz + cfg.beta * dmu_kl
    d_log_sigma = dz * sigma * eps + cfg.beta * dls_kl
    return VerLossResult(
        loss=ce + cfg.beta * kl,
        ce=ce,
        kl=kl,
        d_mu=d_mu,
        d_log_sigma=d_log_sigma,
        classifier_grad=clf_grads,
    )


# ---------------------------------------------------------------------------
# Pretraining: fit the encoder on first-task data, then freeze it
# ---------------------------------------------------------------------------


def pretrain_encoder(task0_images, task0_labels, classes: int, encoder: EncoderModel,
                     epochs: int, lr: float, rng: RngStream, batch_size: int = 32,
                     beta: float = DEFAULT_BETA, clip_norm: float = 5.0,
                     on_epoch=None) -> ParamVector:
    """Train the encoder against a throwaway linear probe; return its parameters.

    random_projection encoders are returned at initialization, untrained.
    Gradients are clipped to a global norm of clip_norm, which keeps the
    from-scratch SGD from blowing up on unlucky initializations.  Callers
    must treat the result as frozen.  on_epoch, when given, receives
    (epoch_index, {"ce": ..., "kl": ...}) after each pass.
    """
    n = len(task0_labels)
    if n == 0:
        raise ContractViolation("pretrain_encoder: empty dataset")
    params = encoder.init_params(rng.child("encoder_init"))
    if encoder.spec.kind == "random_projection":
        return params

    probe = _Dense("probe", encoder.spec.embed_dim, classes, "identity")
    probe_params = ParamVector.from_arrays(probe.init_arrays(rng.child("probe_init")))
    cfg = VerLossConfig(beta=beta)
    labels = np.asarray(task0_labels)

    for epoch in range(epochs):
        order = rng.child("pretrain_shuffle", epoch).permutation(n)
        ce_sum, kl_sum, batches = 0.0, 0.0, 0
        for start in range(0, n, batch_size):
            take = order[start : start + batch_size]
            xb, yb = task0_images[take], labels[take]
            if encoder.spec.kind == "vee":
                mu, log_sigma, caches = encoder.stats_forward(params, xb)
                z, eps = nc.reparam_sample(mu, log_sigma, rng.child("pretrain_eps", epoch, start))
                logits, pcache = probe.forward(probe_params, z)
                ce, dlogits = nc.softmax_cross_entropy(logits, yb)
                pgrads: dict = {}
                dz = probe.backward(probe_params, pcache, dlogits, pgrads)
                kl, dmu_kl, dls_kl = nc.gaussian_kl_batch(mu, log_sigma)
                sigma = nc.sigma_from_log(log_sigma)
                enc_grad = encoder.stats_backward(
                    params, caches, dz + cfg.beta * dmu_kl, dz * sigma * eps + cfg.beta * dls_kl
                )
                kl_sum += kl
            else:
                z, caches = encoder.embed_forward(params, xb)
                logits, pcache = probe.forward(probe_params, z)
                ce, dlogits = nc.softmax_cross_entropy(logits, yb)
                pgrads = {}
                dz = probe.backward(probe_params, pcache, dlogits, pgrads)
                enc_grad = encoder.embed_backward(params, caches, dz)
            params = nc.sgd_step(params, nc.clip_gradient(enc_grad, clip_norm), lr)
            probe_params = nc.sgd_step(
                probe_params, nc.clip_gradient(_grads_to_vector(probe_params, pgrads), clip_norm), lr)
            ce_sum += ce
            batches += 1
        if on_epoch is not None:
            on_epoch(epoch, {"ce": ce_sum / batches, "kl": kl_sum / batches})
    return params
