"""InfoNCE pre-training of small MLP encoders with hand-written backprop.

Encoders map flat inputs to unit vectors. Each contrastive batch holds two
views of every sample; sample ``b`` is scored against its own second view
(the positive) and against the second views of ``num_negatives`` other
samples of the batch drawn uniformly with replacement (the negatives).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as imaging
from .embeddings import EmbeddingSet
from .synthetic import perturb

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
OPTIMIZERS = ("sgd", "adam")
POLICY_MODES = ("rotation", "label", "synthetic_vmf")


class NumericError(RuntimeError):
    """A loss or gradient became non-finite or undefined."""


@dataclass(frozen=True)
class InfoNceConfig:
    temperature: float = 1.0
    num_negatives: int = 16

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.num_negatives < 1:
            raise ValueError(f"num_negatives must be >= 1, got {self.num_negatives}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 256
    optimizer: str = "adam"
    seed: int = 0
    hidden_dims: tuple = (256, 64)
    embed_dim: int = 8
    activation: str = "relu"
    # weights start from this seed when set (shared-init ensembles); data order always follows ``seed``
    init_seed: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (negatives come from the batch)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")


# ---------------------------------------------------------------------------
# encoder


@dataclass
class MlpEncoder:
    weights: list
    biases: list
    activation: str = "relu"
    encoder_id: str = ""
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, layer_dims, seed: int, activation: str = "relu", encoder_id: str = "") -> "MlpEncoder":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"layer_dims must list at least input and output sizes, got {layer_dims}")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases, activation, encoder_id)

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self, encoder_id: str | None = None) -> "MlpEncoder":
        return MlpEncoder(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.encoder_id if encoder_id is None else encoder_id,
            list(self.loss_history),
        )

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(np.float64) if self.activation == "relu" else 1.0 - a * a

    def forward(self, x: np.ndarray):
        """Unit-norm outputs for rows of ``x`` plus the cache needed by ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"input must be (n, {self.input_dim}), got {x.shape}")
        acts, pre = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else self._act(z)
            acts.append(h)
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        if np.any(norm == 0.0):
            raise NumericError("zero pre-normalization output; the normalization Jacobian is undefined")
        e = h / norm
        return e, (acts, pre, norm, e)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, d_out: np.ndarray) -> list:
        """Gradients ``[dW0, db0, dW1, db1, ...]`` given dLoss/d(normalized output)."""
        acts, pre, norm, e = cache
        # Jacobian of h / |h| is (I - e e^T) / |h|
        d = (d_out - e * np.sum(e * d_out, axis=1, keepdims=True)) / norm
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                d = d * self._act_grad(pre[i], acts[i + 1])
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i:
                d = d @ self.weights[i].T
        return grads


# ---------------------------------------------------------------------------
# loss


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _check_unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ValueError(f"{name} is not unit norm")
    return v


def infonce_loss(anchor_emb, positive_emb, negative_embs, cfg: InfoNceConfig) -> float:
    """``-log softmax`` of the positive similarity among positive and negatives, at temperature tau."""
    a = _check_unit(anchor_emb, "anchor_emb")
    p = _check_unit(positive_emb, "positive_emb")
    negs = _check_unit(np.atleast_2d(negative_embs), "negative_embs")
    if a.ndim != 1 or a.shape != p.shape or negs.shape[1] != a.shape[0]:
        raise ValueError("anchor, positive and negatives must share one dimension")
    if negs.shape[0] != cfg.num_negatives:
        raise ValueError(f"expected {cfg.num_negatives} negatives, got {negs.shape[0]}")
    logits = np.concatenate([[a @ p], negs @ a]) / cfg.temperature
    return float(_logsumexp(logits) - logits[0])


def infonce_batch(A: np.ndarray, P: np.ndarray, neg_idx: np.ndarray, cfg: InfoNceConfig):
    """Mean InfoNCE over a batch and its gradients with respect to both view embeddings.

    ``A[b]`` is scored against ``P[b]`` and ``P[neg_idx[b, k]]``.
    Returns ``(loss, dA, dP)``.
    """
    B = A.shape[0]
    pos = np.sum(A * P, axis=1)
    neg = np.einsum("bd,bkd->bk", A, P[neg_idx])
    logits = np.concatenate([pos[:, None], neg], axis=1) / cfg.temperature
    lse = _logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[:, 0]))
    g = np.exp(logits - lse[:, None])
    g[:, 0] -= 1.0
    g /= B * cfg.temperature
    dA = g[:, :1] * P + np.einsum("bk,bkd->bd", g[:, 1:], P[neg_idx])
    dP = g[:, :1] * A
    np.add.at(dP, neg_idx.ravel(), (g[:, 1:, None] * A[:, None, :]).reshape(-1, A.shape[1]))
    return loss, dA, dP


@dataclass
class ContrastiveBatch:
    view_a: np.ndarray
    view_b: np.ndarray
    neg_idx: np.ndarray

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape or self.view_a.shape[0] == 0:
            raise ValueError("a batch needs two equally shaped, nonempty views")
        if self.neg_idx.shape[0] != self.view_a.shape[0]:
            raise ValueError("one row of negative indices per sample")


def infonce_gradient(batch: ContrastiveBatch, encoder: MlpEncoder, cfg: InfoNceConfig):
    """Mean batch InfoNCE and its exact gradient for every weight and bias.

    Returns ``(loss, grads)`` with grads ordered like ``encoder.params()``.
    """
    if batch.neg_idx.shape[1] != cfg.num_negatives:
        raise ValueError(f"batch carries {batch.neg_idx.shape[1]} negatives, config wants {cfg.num_negatives}")
    B = batch.view_a.shape[0]
    e, cache = encoder.forward(np.concatenate([batch.view_a, batch.view_b]))
    loss, dA, dP = infonce_batch(e[:B], e[B:], batch.neg_idx, cfg)
    return loss, encoder.backward(cache, np.concatenate([dA, dP]))


def batch_loss(batch: ContrastiveBatch, encoder: MlpEncoder, cfg: InfoNceConfig) -> float:
    B = batch.view_a.shape[0]
    e = encoder(np.concatenate([batch.view_a, batch.view_b]))
    return infonce_batch(e[:B], e[B:], batch.neg_idx, cfg)[0]


def sample_negatives(batch_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` indices per row drawn uniformly from the other rows of the batch."""
    if batch_size < 2:
        raise ValueError("negatives need at least two samples in the batch")
    r = rng.integers(0, batch_size - 1, size=(batch_size, k))
    return r + (r >= np.arange(batch_size)[:, None])


# ---------------------------------------------------------------------------
# data and positive pairs


@dataclass
class TrainingSet:
    """Inputs for contrastive training.

    ``inputs`` is (N, ...) and is flattened per sample for the encoder;
    ``labels`` and ``latents`` are needed only by the label and synthetic
    pair policies.
    """

    inputs: np.ndarray
    labels: np.ndarray | None = None
    latents: np.ndarray | None = None
    observe: object = None
    # views of (N, H, W, 1) images are replicated to this many channels after augmentation
    channels: int = 1

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.inputs.shape[1:])) * self.channels


@dataclass(frozen=True)
class PositivePairPolicy:
    mode: str = "rotation"
    max_degrees: float = 30.0
    kappa: float = 100.0

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")

    def views(self, ds: TrainingSet, idx: np.ndarray, rng: np.random.Generator):
        n = len(idx)
        if self.mode == "rotation":
            imgs = ds.inputs[idx]
            if imgs.ndim != 4:
                raise ValueError("rotation positives need image inputs shaped (N, H, W, C)")
            angles = rng.uniform(-self.max_degrees, self.max_degrees, size=(2, n))
            a = imaging.rotate_batch(imgs, angles[0])
            b = imaging.rotate_batch(imgs, angles[1])
        elif self.mode == "label":
            if ds.labels is None:
                raise ValueError("label positives need labels")
            a = ds.inputs[idx]
            partner = np.empty(n, dtype=np.int64)
            for j, i in enumerate(idx):
                pool = np.flatnonzero(ds.labels == ds.labels[i])
                partner[j] = pool[rng.integers(len(pool))]
            b = ds.inputs[partner]
        else:
            if ds.latents is None or ds.observe is None:
                raise ValueError("synthetic positives need latents and an observation map")
            z = ds.latents[idx]
            a = ds.observe(z)
            b = ds.observe(perturb(z, self.kappa, rng))
        if ds.channels != 1:
            a = np.repeat(a, ds.channels, axis=-1)
            b = np.repeat(b, ds.channels, axis=-1)
        return a.reshape(n, -1), b.reshape(n, -1)

    def make_batch(self, ds: TrainingSet, idx, rng, num_negatives: int) -> ContrastiveBatch:
        a, b = self.views(ds, np.asarray(idx), rng)
        return ContrastiveBatch(a, b, sample_negatives(len(idx), num_negatives, rng))


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(train: TrainConfig):
    return Adam(train.learning_rate) if train.optimizer == "adam" else Sgd(train.learning_rate)


# ---------------------------------------------------------------------------
# training


def init_encoder(input_dim: int, train: TrainConfig, encoder_id: str = "") -> MlpEncoder:
    init_seed = train.seed if train.init_seed is None else train.init_seed
    dims = [input_dim, *train.hidden_dims, train.embed_dim]
    return MlpEncoder.init(dims, np.random.SeedSequence([init_seed, 0]), train.activation, encoder_id)


def train_encoder(
    dataset: TrainingSet,
    policy: PositivePairPolicy,
    nce: InfoNceConfig,
    train: TrainConfig,
    encoder_id: str = "",
    encoder: MlpEncoder | None = None,
) -> MlpEncoder:
    """Minimize InfoNCE with mini-batches; bit-reproducible for a fixed seed.

    Per-epoch mean losses land in ``encoder.loss_history``.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    enc = encoder.copy(encoder_id or encoder.encoder_id) if encoder else init_encoder(
        dataset.input_dim, train, encoder_id
    )
    enc.loss_history = []
    if len(dataset) < 2:
        raise ValueError("need at least two samples to draw negatives")
    rng = np.random.default_rng(np.random.SeedSequence([train.seed, 1]))
    opt = make_optimizer(train)
    params = enc.params()
    n = len(dataset)
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            if len(idx) < 2:
                continue
            batch = policy.make_batch(dataset, idx, rng, nce.num_negatives)
            loss, grads = infonce_gradient(batch, enc, nce)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericError(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start}: loss={loss!r}"
                )
            opt.step(params, grads)
            losses.append(loss)
            sizes.append(len(idx))
        mean = float(np.average(losses, weights=sizes))
        enc.loss_history.append(mean)
        log.info("%s epoch %d/%d loss %.5f", enc.encoder_id or "encoder", epoch + 1, train.epochs, mean)
    return enc


def embed(
    encoder: MlpEncoder,
    inputs: np.ndarray,
    labels=None,
    domain: str = "id",
    chunk: int = 1024,
) -> EmbeddingSet:
    """Encode every input (flattened per row) in order."""
    x = np.asarray(inputs, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if x.shape[1] != encoder.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match encoder input {encoder.input_dim}")
    rows = [encoder(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    vectors = np.concatenate(rows) if rows else np.zeros((0, encoder.embed_dim))
    return EmbeddingSet(vectors, labels, encoder.encoder_id, domain)


def with_seed(train: TrainConfig, seed: int, **changes) -> TrainConfig:
    return replace(train, seed=seed, **changes)
