"""Exemplar-free task routing.

A parameter-free attention pooling squeezes the frozen encoder's feature map
into one descriptor per image; a small per-task VAE scores descriptors by
their training objective (reconstruction plus beta-weighted KL); the task
with the lowest score wins, unless that score exceeds the task's calibrated
threshold, in which case the input is treated as out-of-distribution and
falls back to the identity alignment layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alignment import IDENTITY_TASK, AlignmentLayer
from .nn import Linear, Module, Rng, Tensor
from .training import TrainingDivergedError, train_loop

__all__ = [
    "OOD",
    "PooledFeature",
    "attention_pool",
    "pool_feature_array",
    "TaskVAE",
    "elbo_per_sample",
    "elbo_loss",
    "train_vae",
    "nearest_rank_percentile",
    "threshold_from_scores",
    "calibrate_threshold",
    "calibration_scores",
    "THRESHOLD_RULES",
    "PoolEntry",
    "RouteDecision",
    "RouterPool",
    "route",
    "make_pooler",
    "POOLER_KINDS",
]

OOD = -1  # routing outcome: no known task accepted; identity layer applies

DEFAULT_BETA = 16.5
DEFAULT_LATENT_DIM = 8
DEFAULT_HIDDEN_DIM = 32
DEFAULT_VAE_EPOCHS = 10
DEFAULT_VAE_LR = 5e-4
DEFAULT_TEMPERATURE = 1.0
DEFAULT_K_FOLDS = 5
DEFAULT_RULE = "p97"


@dataclass(frozen=True)
class PooledFeature:
    """Attention-pooled descriptor of one feature map."""

    f: np.ndarray
    source_shape: tuple[int, int, int]
    temperature: float


def _pool_batch(z: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Pool (B,C,h,w) to (B,C); also returns the attention weights (B,h*w)."""
    b, c, h, w = z.shape
    flat = z.reshape(b, c, h * w)
    scores = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1)) / (c * temperature)
    scores -= scores.max(axis=1, keepdims=True)
    alpha = np.exp(scores)
    alpha /= alpha.sum(axis=1, keepdims=True)
    pooled = (flat * alpha[:, None, :]).sum(axis=2)
    return pooled.astype(np.float32), alpha


def attention_pool(z: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> PooledFeature:
    """Spatial-saliency pooling of one (C,h,w) feature map.

    Per position the channel vector's L2 norm, divided by (C * T), feeds a
    softmax over all positions; the descriptor is the attention-weighted sum
    of channel vectors.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)
    if z.ndim != 3:
        raise ValueError(f"attention_pool expects a (C,h,w) map, got {z.shape}")
    pooled, _ = _pool_batch(z[None], temperature)
    return PooledFeature(f=pooled[0], source_shape=tuple(z.shape), temperature=temperature)


def pool_feature_array(maps: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Vectorized attention pooling of (N,C,h,w) maps to (N,C)."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pooled, _ = _pool_batch(np.asarray(maps, dtype=np.float32), temperature)
    return pooled


class TaskVAE(Module):
    """Two-layer MLP encoder/decoder over pooled descriptors."""

    def __init__(self, feature_dim: int, latent_dim: int = DEFAULT_LATENT_DIM,
                 hidden_dim: int = DEFAULT_HIDDEN_DIM, beta: float = DEFAULT_BETA,
                 rng: Rng | None = None):
        rng = rng or Rng(0)
        self.feature_dim = feature_dim
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.beta = beta
        self.enc_fc1 = Linear(feature_dim, hidden_dim, rng=rng.child("e1"))
        self.enc_fc2 = Linear(hidden_dim, 2 * latent_dim, rng=rng.child("e2"))
        self.dec_fc1 = Linear(latent_dim, hidden_dim, rng=rng.child("d1"))
        self.dec_fc2 = Linear(hidden_dim, feature_dim, rng=rng.child("d2"))
        # recorded when trained, reused by threshold calibration fold models
        self.fit_epochs = DEFAULT_VAE_EPOCHS
        self.fit_lr = DEFAULT_VAE_LR
        self.fit_batch = 16

    def encode_stats(self, f: Tensor) -> tuple[Tensor, Tensor]:
        h = self.enc_fc1(f).relu()
        stats = self.enc_fc2(h)
        mu = stats[:, : self.latent_dim]
        log_var = stats[:, self.latent_dim :]
        return mu, log_var

    def decode_latent(self, z: Tensor) -> Tensor:
        return self.dec_fc2(self.dec_fc1(z).relu())


def elbo_per_sample(vae: TaskVAE, features, mode: str = "score",
                    rng: Rng | None = None) -> Tensor:
    """Per-sample ELBO scores for (N,D) features as an (N,) tensor.

    The score is (1/D)*||f - f_hat||^2 plus (beta/2) * sum over latent
    dimensions of (mu^2 + sigma^2 - 1 - log sigma^2). Training mode decodes
    a reparameterized latent sample; score mode decodes the mean latent and
    is fully deterministic.
    """
    if mode not in ("train", "score"):
        raise ValueError(f"mode must be 'train' or 'score', got {mode!r}")
    f = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(features))
    if f.shape[1] != vae.feature_dim:
        raise ValueError(f"feature dim {f.shape[1]} != VAE dim {vae.feature_dim}")
    mu, log_var = vae.encode_stats(f)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode ELBO needs an Rng for the latent sample")
        eps = Tensor(rng.normal(mu.shape))
        z = mu + (log_var * 0.5).exp() * eps
    else:
        z = mu
    f_hat = vae.decode_latent(z)
    diff = f - f_hat
    recon = (diff * diff).mean(axis=1)
    kl = (mu * mu + log_var.exp() - 1.0 - log_var).sum(axis=1) * (0.5 * vae.beta)
    return recon + kl


def elbo_loss(vae: TaskVAE, features, mode: str = "score",
              rng: Rng | None = None) -> Tensor:
    """Scalar ELBO (mean over the batch). Rejects non-finite results."""
    per_sample = elbo_per_sample(vae, features, mode=mode, rng=rng)
    loss = per_sample.mean()
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError("ELBO evaluated to a non-finite value")
    return loss


def score_features(vae: TaskVAE, features: np.ndarray) -> np.ndarray:
    """Deterministic per-sample scores (score mode) as a plain array."""
    return elbo_per_sample(vae, Tensor(np.atleast_2d(features)), mode="score").data


def train_vae(
    features: np.ndarray,
    *,
    beta: float = DEFAULT_BETA,
    latent_dim: int = DEFAULT_LATENT_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    epochs: int = DEFAULT_VAE_EPOCHS,
    lr: float = DEFAULT_VAE_LR,
    batch_size: int = 16,
    rng: Rng,
    pooler: "LearnedPoolerMixin | None" = None,
    feature_maps: np.ndarray | None = None,
) -> tuple[TaskVAE, list[float]]:
    """Fit a task VAE on pooled descriptors.

    With a learnable pooler, raw feature maps are pooled inside the training
    graph so the pooler's parameters train jointly with the VAE.
    """
    if pooler is None:
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or len(features) < 2:
            raise ValueError("train_vae needs at least two (N,D) features")
        n, dim = features.shape
    else:
        if feature_maps is None:
            raise ValueError("a learnable pooler needs raw feature maps")
        n, dim = len(feature_maps), pooler.dim

    vae = TaskVAE(dim, latent_dim=latent_dim, hidden_dim=hidden_dim, beta=beta,
                  rng=rng.child("init"))
    vae.fit_epochs, vae.fit_lr, vae.fit_batch = epochs, lr, batch_size
    sample_rng = rng.child("latent")
    step_counter = [0]

    def batch_loss(idx: np.ndarray) -> Tensor:
        step_counter[0] += 1
        if pooler is None:
            f = Tensor(features[idx])
        else:
            f = pooler.pool_graph(Tensor(feature_maps[idx]))
        return elbo_loss(vae, f, mode="train", rng=sample_rng.child("step", step_counter[0]))

    params = vae.parameters()
    if pooler is not None and isinstance(pooler, Module):
        params = params + pooler.parameters()
    history = train_loop(
        params, batch_loss, n,
        epochs=epochs, batch_size=min(batch_size, n), lr=lr,
        rng=rng.child("loop"), context="VAE training",
    )
    return vae, history


# -- threshold calibration ----------------------------------------------------

THRESHOLD_RULES = ("mu_plus_2sigma", "p95", "p97", "p99")


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile (no interpolation)."""
    s = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(p / 100.0 * len(s)))
    return float(s[rank - 1])


def threshold_from_scores(scores: np.ndarray, rule: str) -> float:
    """Apply a calibration rule to a pooled held-out score distribution."""
    scores = np.asarray(scores, dtype=np.float64)
    if rule == "mu_plus_2sigma":
        return float(scores.mean() + 2.0 * scores.std())
    if rule in ("p95", "p97", "p99"):
        return nearest_rank_percentile(scores, float(rule[1:]))
    raise ValueError(f"unknown threshold rule {rule!r}; use one of {THRESHOLD_RULES}")


def calibrate_threshold(
    vae: TaskVAE,
    features: np.ndarray,
    k_folds: int = DEFAULT_K_FOLDS,
    rule: str = DEFAULT_RULE,
    *,
    rng: Rng,
) -> float:
    """K-fold held-out score calibration.

    Each fold model is trained on the other K-1 folds with the same
    hyperparameters as `vae`; the pooled held-out scores feed the rule.
    """
    features = np.asarray(features, dtype=np.float32)
    if k_folds < 2:
        raise ValueError(f"calibration needs K >= 2 folds, got {k_folds}")
    if len(features) < k_folds:
        raise ValueError(
            f"calibration needs at least K={k_folds} samples, got {len(features)}"
        )
    if rule not in THRESHOLD_RULES:
        raise ValueError(f"unknown threshold rule {rule!r}; use one of {THRESHOLD_RULES}")
    pooled = calibration_scores(vae, features, k_folds, rng=rng)
    return threshold_from_scores(pooled, rule)


def calibration_scores(vae: TaskVAE, features: np.ndarray, k_folds: int,
                       *, rng: Rng) -> np.ndarray:
    """Pooled held-out ELBO scores from the K-fold calibration protocol."""
    features = np.asarray(features, dtype=np.float32)
    order = rng.child("folds").permutation(len(features))
    folds = np.array_split(order, k_folds)
    held_out_scores = []
    for i, fold in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        fold_vae, _ = train_vae(
            features[train_idx],
            beta=vae.beta, latent_dim=vae.latent_dim, hidden_dim=vae.hidden_dim,
            epochs=vae.fit_epochs, lr=vae.fit_lr, batch_size=vae.fit_batch,
            rng=rng.child("fold", i),
        )
        held_out_scores.append(score_features(fold_vae, features[fold]))
    return np.concatenate(held_out_scores)


# -- the router pool -----------------------------------------------------------


@dataclass
class PoolEntry:
    layer: AlignmentLayer
    vae: TaskVAE
    tau: float


@dataclass
class RouteDecision:
    chosen: int  # task id, or OOD
    scores: dict[int, float]
    threshold_used: float

    @property
    def is_ood(self) -> bool:
        return self.chosen == OOD


@dataclass
class RouterPool:
    """Per-task alignment layers, scoring VAEs, and calibrated thresholds.

    Immutable after construction as far as routing is concerned; `route` is
    a pure function of (pool, feature map, temperature).
    """

    entries: dict[int, PoolEntry] = field(default_factory=dict)
    identity_layer: AlignmentLayer = field(default_factory=AlignmentLayer.identity)
    temperature: float = DEFAULT_TEMPERATURE
    rule: str = DEFAULT_RULE

    def add(self, task_id: int, layer: AlignmentLayer, vae: TaskVAE, tau: float) -> None:
        if not np.isfinite(tau) or tau <= 0:
            raise ValueError(f"threshold for task {task_id} must be finite and positive, got {tau}")
        self.entries[task_id] = PoolEntry(layer=layer, vae=vae, tau=tau)

    def task_ids(self) -> list[int]:
        return sorted(self.entries)

    def layer_for(self, decision: RouteDecision) -> AlignmentLayer:
        if decision.is_ood:
            return self.identity_layer
        return self.entries[decision.chosen].layer


def route(pool: RouterPool, z: np.ndarray, temperature: float | None = None) -> RouteDecision:
    """Score one feature map against every task VAE and pick the argmin.

    Ties break toward the lowest task id. If even the winning score exceeds
    its task's threshold the input is declared OOD, selecting the identity
    alignment layer.
    """
    if not pool.entries:
        raise ValueError("cannot route with an empty pool")
    t = pool.temperature if temperature is None else temperature
    f = attention_pool(z, t).f
    scores = {
        task_id: float(score_features(entry.vae, f[None])[0])
        for task_id, entry in sorted(pool.entries.items())
    }
    best = min(scores, key=lambda task_id: (scores[task_id], task_id))
    tau = pool.entries[best].tau
    chosen = best if scores[best] <= tau else OOD
    return RouteDecision(chosen=chosen, scores=scores, threshold_used=tau)


# -- pooling variants (for the pooling ablation harness) -------------------------


class LearnedPoolerMixin:
    dim: int

    def pool_graph(self, maps: Tensor) -> Tensor:  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, z: np.ndarray) -> np.ndarray:
        single = z.ndim == 3
        maps = Tensor(np.asarray(z, dtype=np.float32)[None] if single else z)
        out = self.pool_graph(maps).data
        return out[0] if single else out


class AttentionPooler(LearnedPoolerMixin):
    """Parameter-free attention pooling (the default routing features)."""

    kind = "attention"

    def __init__(self, feature_shape, temperature: float = DEFAULT_TEMPERATURE):
        self.dim = feature_shape[0]
        self.temperature = temperature

    def pool_graph(self, maps: Tensor) -> Tensor:
        raise NotImplementedError("parameter-free pooling has no trainable graph")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if z.ndim == 3:
            return attention_pool(z, self.temperature).f
        return pool_feature_array(z, self.temperature)


class GapPooler(LearnedPoolerMixin):
    """Adaptive global average pooling over spatial positions."""

    kind = "gap"

    def __init__(self, feature_shape):
        self.dim = feature_shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        return z.mean(axis=(-2, -1))


class MeanPooler(GapPooler):
    """Plain spatial mean; numerically the T -> infinity limit of attention
    pooling (kept distinct to mirror the ablation grid)."""

    kind = "mean"


class FlattenPooler(LearnedPoolerMixin):
    """Flatten the map and project with a fixed seeded Gaussian matrix.

    The projection is deterministic rather than trained: it keeps the
    variant cheap and reproducible while preserving what the ablation is
    probing (loss of spatial invariance).
    """

    kind = "flatten"

    def __init__(self, feature_shape, out_dim: int | None = None, seed: int = 0):
        c, h, w = feature_shape
        self.dim = out_dim if out_dim is not None else c
        flat_dim = c * h * w
        self.projection = Rng(seed).child("flatten_proj").normal(
            (flat_dim, self.dim), std=1.0 / math.sqrt(flat_dim)
        )

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        single = z.ndim == 3
        flat = z.reshape(1 if single else z.shape[0], -1)
        out = flat @ self.projection
        return out[0] if single else out


class LearnableAttentionPooler(LearnedPoolerMixin, Module):
    """Attention pooling with a trainable per-channel scoring vector,
    trained jointly with the task VAE."""

    kind = "attention_learned"

    def __init__(self, feature_shape, temperature: float = DEFAULT_TEMPERATURE,
                 rng: Rng | None = None):
        c = feature_shape[0]
        self.dim = c
        self.temperature = temperature
        rng = rng or Rng(0)
        from .nn import Parameter

        self.score_vec = Parameter(rng.normal((c,), std=1.0 / math.sqrt(c)))

    def pool_graph(self, maps: Tensor) -> Tensor:
        from .nn import softmax

        b, c, h, w = maps.shape
        flat = maps.reshape(b, c, h * w)
        v = self.score_vec.reshape(1, c, 1)
        scores = (flat * v).sum(axis=1) * (1.0 / (c * self.temperature))
        alpha = softmax(scores, axis=1)
        weighted = flat * alpha.reshape(b, 1, h * w)
        return weighted.sum(axis=2)


class ClsQueryPooler(LearnableAttentionPooler):
    """Degenerate stand-in for CLS-token pooling: the conv encoder has no
    token stream, so a learned global query plays the token's role. Reports
    that use this variant should note the mismatch."""

    kind = "cls"


POOLER_KINDS = ("attention", "gap", "mean", "flatten", "attention_learned", "cls")


def make_pooler(kind: str, feature_shape, temperature: float = DEFAULT_TEMPERATURE,
                rng: Rng | None = None):
    if kind == "attention":
        return AttentionPooler(feature_shape, temperature)
    if kind == "gap":
        return GapPooler(feature_shape)
    if kind == "mean":
        return MeanPooler(feature_shape)
    if kind == "flatten":
        return FlattenPooler(feature_shape)
    if kind == "attention_learned":
        return LearnableAttentionPooler(feature_shape, temperature, rng)
    if kind == "cls":
        return ClsQueryPooler(feature_shape, temperature, rng)
    raise ValueError(f"unknown pooling variant {kind!r}; use one of {POOLER_KINDS}")
