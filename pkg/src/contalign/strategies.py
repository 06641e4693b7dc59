"""Continual-learning regimes over the frozen backbone.

Every strategy consumes a task stream and produces the stage-by-stage
evaluation matrix: after training on task t, all test sets seen so far are
evaluated. Training sets lock once their stage ends, so revisiting past
task data is a runtime error rather than a convention; replay-style methods
work off their own stored copies (and are flagged as not exemplar-free).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_N_BLOCKS,
    AlignmentLayer,
    train_alignment,
)
from .backbone import FrozenBackbone
from .data import Sample, StreamTask
from .metrics import StageMetrics, TaskEval, biou, default_band_width, iou
from .nn import Parameter, Rng, Tensor, concat
from .router import (
    DEFAULT_BETA,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_K_FOLDS,
    DEFAULT_LATENT_DIM,
    DEFAULT_RULE,
    DEFAULT_TEMPERATURE,
    DEFAULT_VAE_LR,
    OOD,
    RouterPool,
    attention_pool,
    calibrate_threshold,
    pool_feature_array,
    route,
    train_vae,
)
from .training import batch_arrays, epoch_batches, segmentation_loss, train_loop

__all__ = [
    "RouterConfig",
    "StrategyConfig",
    "StrategyResult",
    "MemoryBank",
    "elect_unified_vector",
    "apply_task_mask",
    "key_match_loss",
    "evaluate_single_layer",
    "STRATEGIES",
    "EXEMPLAR_FREE",
    "run_strategy",
    "run_naive",
    "run_joint",
    "run_lwf",
    "run_ewc",
    "run_er",
    "run_der",
    "run_l2p",
    "run_moda",
    "run_emr",
    "run_routed",
]


@dataclass(frozen=True)
class RouterConfig:
    beta: float = DEFAULT_BETA
    latent_dim: int = DEFAULT_LATENT_DIM
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    epochs: int = 500
    lr: float = DEFAULT_VAE_LR
    batch_size: int = 16
    temperature: float = DEFAULT_TEMPERATURE
    k_folds: int = DEFAULT_K_FOLDS
    rule: str = DEFAULT_RULE


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    seed: int = 0
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH
    n_blocks: int = DEFAULT_N_BLOCKS
    lambda_distill: float = 1.0  # LwF
    lambda_ewc: float = 100.0  # EWC
    memory_capacity: int = 32  # ER / DER / MoDA
    der_alpha: float = 0.5  # DER
    prompt_pool_size: int = 12  # L2P
    prompt_top_k: int = 2
    use_task_slots: bool = True
    classifier_epochs: int = 200  # MoDA router head
    oracle_routing: bool = False  # routed strategy: ground-truth task ids
    router: RouterConfig = field(default_factory=RouterConfig)

    def __post_init__(self):
        if self.memory_capacity < 0:
            raise ValueError("memory capacity must be >= 0")
        if self.lambda_distill < 0 or self.lambda_ewc < 0:
            raise ValueError("regularization strengths must be >= 0")


@dataclass
class StrategyResult:
    name: str
    stage_metrics: StageMetrics
    pool: RouterPool | None = None
    stored_samples: int = 0  # peak count of retained past samples
    info: dict = field(default_factory=dict)


# -- memory banks -----------------------------------------------------------------


class MemoryBank:
    """Bounded storage of past samples (optionally with frozen logits).

    `reservoir` keeps each stream element with probability capacity/n_seen;
    `per-task-quota` keeps an equal random share per task, shrinking older
    shares as tasks arrive.
    """

    def __init__(self, capacity: int, policy: str, rng: Rng):
        if policy not in ("reservoir", "per-task-quota"):
            raise ValueError(f"unknown insertion policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self._rng = rng
        self.n_seen = 0
        self.entries: list[tuple[Sample, np.ndarray | None]] = []
        self._by_task: dict[int, list[Sample]] = {}
        self.reads = 0

    def __len__(self) -> int:
        if self.policy == "per-task-quota":
            return sum(len(v) for v in self._by_task.values())
        return len(self.entries)

    def reservoir_update(self, sample: Sample, logits: np.ndarray | None = None) -> None:
        if self.policy != "reservoir":
            raise ValueError("reservoir_update requires the reservoir policy")
        self.n_seen += 1
        if self.capacity == 0:
            return
        if len(self.entries) < self.capacity:
            self.entries.append((sample, logits))
        else:
            slot = self._rng.integers(0, self.n_seen)
            if slot < self.capacity:
                self.entries[slot] = (sample, logits)

    def add_task_quota(self, task_id: int, samples: list[Sample]) -> None:
        if self.policy != "per-task-quota":
            raise ValueError("add_task_quota requires the per-task-quota policy")
        if self.capacity == 0:
            return
        self._by_task[task_id] = list(samples)
        quota = max(1, self.capacity // len(self._by_task))
        for tid in sorted(self._by_task):
            kept = self._by_task[tid]
            if len(kept) > quota:
                idx = self._rng.child("quota", tid, len(self._by_task)).choice(
                    len(kept), quota, replace=False
                )
                self._by_task[tid] = [kept[i] for i in sorted(idx)]

    def samples(self) -> list[Sample]:
        self.reads += len(self)
        if self.policy == "per-task-quota":
            return [s for tid in sorted(self._by_task) for s in self._by_task[tid]]
        return [s for s, _ in self.entries]

    def sample_with_logits(self, k: int, rng: Rng) -> list[tuple[Sample, np.ndarray]]:
        k = min(k, len(self.entries))
        idx = rng.choice(len(self.entries), k, replace=False)
        self.reads += k
        return [self.entries[i] for i in idx]


# -- task-vector merging ------------------------------------------------------------


def elect_unified_vector(task_vectors: list[np.ndarray]) -> np.ndarray:
    """Coordinatewise election: where every task agrees in (nonzero) sign,
    keep the largest-magnitude value; elsewhere zero."""
    stack = np.stack(task_vectors)
    signs = np.sign(stack)
    consistent = (signs == signs[0]).all(axis=0) & (signs[0] != 0)
    magnitudes = np.abs(stack)
    winner = magnitudes.argmax(axis=0)
    elected = stack[winner, np.arange(stack.shape[1])]
    return np.where(consistent, elected, 0.0).astype(stack.dtype)


def apply_task_mask(unified: np.ndarray, task_vector: np.ndarray) -> tuple[np.ndarray, float]:
    """Zero out coordinates whose sign conflicts with the task vector, then
    rescale the survivor to the task vector's norm."""
    mask = (np.sign(unified) == np.sign(task_vector)) & (unified != 0)
    masked = np.where(mask, unified, 0.0)
    denom = float(np.linalg.norm(masked))
    if denom == 0.0:
        return masked.astype(task_vector.dtype), 0.0
    lam = float(np.linalg.norm(task_vector)) / denom
    return (masked * lam).astype(task_vector.dtype), lam


# -- evaluation helpers ---------------------------------------------------------------


def _predict_logits(backbone: FrozenBackbone, layer: AlignmentLayer,
                    images: np.ndarray, boxes: np.ndarray, chunk: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(images), chunk):
        z = backbone.encode(images[i : i + chunk])
        out.append(backbone.decode(layer(z), Tensor(boxes[i : i + chunk])).data)
    return np.concatenate(out)


def evaluate_single_layer(backbone: FrozenBackbone, layer: AlignmentLayer,
                          samples) -> TaskEval:
    samples = list(samples)
    images, masks, boxes = batch_arrays(samples, backbone.config.feature_size)
    logits = _predict_logits(backbone, layer, images, boxes)
    band = default_band_width(images.shape[-2:])
    ious = [iou(l[0] > 0, m[0]) for l, m in zip(logits, masks)]
    bious = [biou(l[0] > 0, m[0], band) for l, m in zip(logits, masks)]
    return TaskEval(iou=float(np.mean(ious)), biou=float(np.mean(bious)), n=len(samples))


def _evaluate_routed(backbone: FrozenBackbone, pool: RouterPool, samples,
                     true_task: int, oracle: bool) -> tuple[TaskEval, list[int]]:
    samples = list(samples)
    images, masks, boxes = batch_arrays(samples, backbone.config.feature_size)
    features = backbone.encode_array(images)
    if oracle:
        chosen = [true_task] * len(samples)
    else:
        chosen = [route(pool, features[i]).chosen for i in range(len(samples))]
    band = default_band_width(images.shape[-2:])
    ious = np.zeros(len(samples))
    bious = np.zeros(len(samples))
    for task_id in set(chosen):
        idx = [i for i, c in enumerate(chosen) if c == task_id]
        layer = pool.identity_layer if task_id == OOD else pool.entries[task_id].layer
        logits = backbone.decode(layer(Tensor(features[idx])), Tensor(boxes[idx])).data
        for j, i in enumerate(idx):
            ious[i] = iou(logits[j, 0] > 0, masks[i, 0])
            bious[i] = biou(logits[j, 0] > 0, masks[i, 0], band)
    te = TaskEval(iou=float(ious.mean()), biou=float(bious.mean()), n=len(samples))
    return te, chosen


def _unlock_all(stream: list[StreamTask]) -> None:
    for task in stream:
        task.train.unlock()


def _fresh_layer(channels: int, cfg: StrategyConfig, task_id: int, tag: str = "layer") -> AlignmentLayer:
    return AlignmentLayer(channels, cfg.n_blocks, task_id,
                          Rng(cfg.seed).child(tag, task_id))


# -- strategy implementations -----------------------------------------------------------


def _run_rehearsal(stream, backbone, cfg: StrategyConfig, capacity: int) -> StrategyResult:
    """Shared core of naive (capacity 0) and experience replay."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    layer = _fresh_layer(channels, cfg, 0)
    memory = MemoryBank(capacity, "per-task-quota", Rng(cfg.seed).child("memory"))
    peak = 0
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            combined = list(task.train) + memory.samples()
            train_alignment(
                combined, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid),
            )
            exemplars = list(task.train)
            task.train.lock()
            if capacity > 0:
                keep = Rng(cfg.seed).child("select", tid).choice(
                    len(exemplars), min(len(exemplars), capacity), replace=False
                )
                memory.add_task_quota(tid, [exemplars[i] for i in sorted(keep)])
            peak = max(peak, len(memory))
            for seen in stream[:stage]:
                sm.record(stage, seen.spec.task_id,
                          evaluate_single_layer(backbone, layer, seen.test))
    finally:
        _unlock_all(stream)
    name = "naive" if capacity == 0 else "er"
    return StrategyResult(name=name, stage_metrics=sm, stored_samples=peak,
                          info={"layers": {"final": layer}})


def run_naive(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Sequential fine-tuning of one alignment layer, no CL mechanism."""
    result = _run_rehearsal(stream, backbone, cfg, capacity=0)
    result.name = "naive"
    return result


def run_er(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Experience replay: train on current data plus stored exemplars."""
    result = _run_rehearsal(stream, backbone, cfg, capacity=cfg.memory_capacity)
    result.name = "er"
    return result


def run_joint(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Offline upper bound: at each stage, retrain from scratch on the union
    of all data seen so far. Exempt from the no-revisit protocol."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    for stage in range(1, len(stream) + 1):
        layer = _fresh_layer(channels, cfg, 0)
        union: list[Sample] = []
        for task in stream[:stage]:
            union.extend(task.train.raw())
        train_alignment(
            union, backbone, layer,
            epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
            rng=Rng(cfg.seed).child("fit", stage),
        )
        for seen in stream[:stage]:
            sm.record(stage, seen.spec.task_id,
                      evaluate_single_layer(backbone, layer, seen.test))
    return StrategyResult(name="joint", stage_metrics=sm,
                          info={"layers": {"final": layer}})


def run_lwf(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Learning without forgetting: the previous stage's layer is a frozen
    teacher; a mean-squared logit-consistency term restrains the student."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    layer = _fresh_layer(channels, cfg, 0)
    teacher: AlignmentLayer | None = None
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            extra = None
            if teacher is not None and cfg.lambda_distill > 0:
                frozen_teacher = teacher

                def extra(idx, z, box_t, logits, _t=frozen_teacher):
                    with_teacher = backbone.decode(_t(z), box_t)
                    diff = logits - with_teacher
                    return (diff * diff).mean() * cfg.lambda_distill

            train_alignment(
                task.train, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid), extra_loss=extra,
            )
            task.train.lock()
            teacher = layer.clone()
            teacher.freeze()
            for seen in stream[:stage]:
                sm.record(stage, seen.spec.task_id,
                          evaluate_single_layer(backbone, layer, seen.test))
    finally:
        _unlock_all(stream)
    return StrategyResult(name="lwf", stage_metrics=sm,
                          info={"layers": {"final": layer}})


def estimate_diagonal_fisher(backbone, layer, samples, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """Empirical diagonal Fisher: mean squared batch gradient of the
    segmentation loss at the current parameters."""
    images, masks, boxes = batch_arrays(list(samples), backbone.config.feature_size)
    features = backbone.encode_array(images)
    params = layer.parameters()
    fisher = [np.zeros_like(p.data) for p in params]
    batches = epoch_batches(len(images), batch_size, rng)
    for idx in batches:
        layer.zero_grad()
        logits = backbone.decode(layer(Tensor(features[idx])), Tensor(boxes[idx]))
        loss = segmentation_loss(logits, Tensor(masks[idx]))
        loss.backward()
        for acc, p in zip(fisher, params):
            if p.grad is not None:
                acc += p.grad.astype(np.float64) ** 2
    layer.zero_grad()
    return [(f / len(batches)).astype(np.float32) for f in fisher]


def ewc_penalty(layer: AlignmentLayer, fisher: list[np.ndarray],
                anchor: list[np.ndarray], lam: float) -> Tensor:
    """lambda * sum_i F_i (theta_i - anchor_i)^2 over all parameters."""
    total = None
    for p, f, a in zip(layer.parameters(), fisher, anchor):
        diff = p - Tensor(a)
        term = (diff * diff * Tensor(f)).sum()
        total = term if total is None else total + term
    return total * lam


def run_ewc(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Elastic weight consolidation against the previous task's parameters,
    weighted by the empirical diagonal Fisher."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    layer = _fresh_layer(channels, cfg, 0)
    fisher: list[np.ndarray] | None = None
    anchor: list[np.ndarray] | None = None
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            extra = None
            if fisher is not None and cfg.lambda_ewc > 0:
                fixed_f, fixed_a = fisher, anchor

                def extra(idx, z, box_t, logits, _f=fixed_f, _a=fixed_a):
                    return ewc_penalty(layer, _f, _a, cfg.lambda_ewc)

            train_alignment(
                task.train, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid), extra_loss=extra,
            )
            fisher = estimate_diagonal_fisher(
                backbone, layer, task.train, cfg.batch_size,
                Rng(cfg.seed).child("fisher", tid),
            )
            anchor = [p.data.copy() for p in layer.parameters()]
            task.train.lock()
            for seen in stream[:stage]:
                sm.record(stage, seen.spec.task_id,
                          evaluate_single_layer(backbone, layer, seen.test))
    finally:
        _unlock_all(stream)
    return StrategyResult(name="ewc", stage_metrics=sm,
                          info={"layers": {"final": layer}})


def run_der(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Dark experience replay: reservoir-stored (sample, logits) pairs add an
    alpha-weighted logit-matching term on top of the current-task loss."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    layer = _fresh_layer(channels, cfg, 0)
    memory = MemoryBank(cfg.memory_capacity, "reservoir", Rng(cfg.seed).child("memory"))
    fsize = backbone.config.feature_size
    peak = 0
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            samples = list(task.train)
            replay_rng = Rng(cfg.seed).child("replay", tid)
            current_logits: dict[int, np.ndarray] = {}

            def extra(idx, z, box_t, logits):
                for j, i in enumerate(idx):
                    current_logits[int(i)] = logits.data[j].copy()
                if cfg.der_alpha == 0 or not memory.entries:
                    return None
                replayed = memory.sample_with_logits(len(idx), replay_rng)
                r_images, _, r_boxes = batch_arrays([s for s, _ in replayed], fsize)
                stored = Tensor(np.stack([logit for _, logit in replayed]))
                r_logits = backbone.decode(
                    layer(Tensor(backbone.encode_array(r_images))), Tensor(r_boxes)
                )
                diff = r_logits - stored
                return (diff * diff).mean() * cfg.der_alpha

            def after_step(idx: np.ndarray) -> None:
                for i in idx:
                    memory.reservoir_update(samples[int(i)], current_logits[int(i)])

            train_alignment(
                samples, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid),
                extra_loss=extra, after_step=after_step,
            )
            peak = max(peak, len(memory))
            task.train.lock()
            for seen in stream[:stage]:
                sm.record(stage, seen.spec.task_id,
                          evaluate_single_layer(backbone, layer, seen.test))
    finally:
        _unlock_all(stream)
    return StrategyResult(name="der", stage_metrics=sm, stored_samples=peak,
                          info={"layers": {"final": layer}})


def key_match_loss(keys: list[Parameter], queries: np.ndarray,
                   selections: list[list[int]]) -> Tensor:
    """Mean squared distance pulling each selected key toward its query."""
    total = None
    count = 0
    for q_row, sel in zip(queries, selections):
        q = Tensor(q_row)
        for ki in sel:
            diff = keys[ki] - q
            term = (diff * diff).sum()
            total = term if total is None else total + term
            count += 1
    return total * (1.0 / count)


def run_l2p(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Prompt-pool adaptation: pooled features query a key/prompt pool; the
    selected prompts are added to the aligned features before decoding.

    The shared alignment layer trains only during the first stage (after
    which it acts as the pre-trained base); later stages update prompts and
    keys alone. Task slots, when enabled, restrict training-time selection
    to each task's own key range.
    """
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    fsize = backbone.config.feature_size
    feat_dim = channels
    rng = Rng(cfg.seed)
    layer = _fresh_layer(channels, cfg, 0)
    pool_n = cfg.prompt_pool_size
    keys = [Parameter(rng.child("key", i).normal((feat_dim,), std=0.5)) for i in range(pool_n)]
    prompts = [Parameter(np.zeros((channels, fsize, fsize), dtype=np.float32))
               for _ in range(pool_n)]
    slot = max(1, pool_n // len(stream)) if cfg.use_task_slots else pool_n
    temperature = cfg.router.temperature

    def select(query: np.ndarray, candidates: list[int]) -> list[int]:
        dists = [(float(np.linalg.norm(keys[i].data - query)), i) for i in candidates]
        dists.sort()
        return [i for _, i in dists[: cfg.prompt_top_k]]

    def forward_batch(feats: np.ndarray, box_t: Tensor, selections: list[list[int]]):
        rows = []
        for sel in selections:
            stacked = [prompts[i].reshape(1, channels, fsize, fsize) for i in sel]
            add = stacked[0]
            for extra_p in stacked[1:]:
                add = add + extra_p
            rows.append(add * (1.0 / len(sel)))
        prompt_add = concat(rows, axis=0)
        aligned = layer(Tensor(feats)) + prompt_add
        return backbone.decode(aligned, box_t)

    peak = 0
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            samples = list(task.train)
            images, masks, boxes = batch_arrays(samples, fsize)
            features = backbone.encode_array(images)
            queries = pool_feature_array(features, temperature)
            if cfg.use_task_slots:
                lo = (stage - 1) * slot
                candidates = list(range(lo, min(lo + slot, pool_n))) or [pool_n - 1]
            else:
                candidates = list(range(pool_n))
            selections = [select(q, candidates) for q in queries]

            def batch_loss(idx: np.ndarray) -> Tensor:
                box_t = Tensor(boxes[idx])
                logits = forward_batch(features[idx], box_t, [selections[i] for i in idx])
                loss = segmentation_loss(logits, Tensor(masks[idx]))
                match = key_match_loss(keys, queries[idx],
                                       [selections[int(i)] for i in idx])
                return loss + match

            trainable: list[Parameter] = [keys[i] for i in candidates]
            trainable += [prompts[i] for i in candidates]
            if stage == 1:
                trainable += layer.parameters()
            train_loop(
                trainable, batch_loss, len(samples),
                epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                rng=Rng(cfg.seed).child("fit", tid), context=f"l2p task {tid}",
            )
            task.train.lock()

            for seen in stream[:stage]:
                s_samples = list(seen.test)
                s_images, s_masks, s_boxes = batch_arrays(s_samples, fsize)
                s_feats = backbone.encode_array(s_images)
                s_queries = pool_feature_array(s_feats, temperature)
                s_sel = [select(q, list(range(pool_n))) for q in s_queries]
                logits = forward_batch(s_feats, Tensor(s_boxes), s_sel).data
                band = default_band_width(s_images.shape[-2:])
                ious = [iou(l[0] > 0, m[0]) for l, m in zip(logits, s_masks)]
                bious = [biou(l[0] > 0, m[0], band) for l, m in zip(logits, s_masks)]
                sm.record(stage, seen.spec.task_id,
                          TaskEval(float(np.mean(ious)), float(np.mean(bious)), len(s_samples)))
    finally:
        _unlock_all(stream)
    return StrategyResult(
        name="l2p", stage_metrics=sm, stored_samples=peak,
        info={
            "slot_size": slot,
            "keys_final": [k.data.copy() for k in keys],
            "prompts_final": [p.data.copy() for p in prompts],
        },
    )


class _SoftmaxHead:
    """Linear classifier over pooled features, retrained each stage."""

    def __init__(self, dim: int, n_classes: int, rng: Rng):
        from .nn import Linear

        self.linear = Linear(dim, n_classes, rng=rng)
        self.n_classes = n_classes

    def fit(self, feats: np.ndarray, labels: np.ndarray, epochs: int, rng: Rng) -> None:
        from .nn import log_softmax

        onehot = np.zeros((len(labels), self.n_classes), dtype=np.float32)
        onehot[np.arange(len(labels)), labels] = 1.0

        def batch_loss(idx: np.ndarray) -> Tensor:
            logp = log_softmax(self.linear(Tensor(feats[idx])), axis=1)
            return -(logp * Tensor(onehot[idx])).sum(axis=1).mean()

        train_loop(self.linear.parameters(), batch_loss, len(feats),
                   epochs=epochs, batch_size=min(32, len(feats)), lr=1e-2,
                   rng=rng, context="task classifier")

    def predict(self, feats: np.ndarray) -> np.ndarray:
        scores = feats @ self.linear.weight.data + self.linear.bias.data
        return scores.argmax(axis=1)


def run_moda(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Per-task alignment layers with a hard softmax task classifier trained
    on stored exemplars (not exemplar-free); OOD inputs are always assigned
    to some trained task, there is no fallback."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    fsize = backbone.config.feature_size
    temperature = cfg.router.temperature
    layers: dict[int, AlignmentLayer] = {}
    bank: dict[int, list[Sample]] = {}
    task_order: list[int] = []
    peak = 0
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            task_order.append(tid)
            layer = _fresh_layer(channels, cfg, tid)
            train_alignment(
                task.train, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid),
            )
            layers[tid] = layer
            exemplars = list(task.train)
            quota = max(1, cfg.memory_capacity // stage)
            keep = Rng(cfg.seed).child("mem", tid).choice(
                len(exemplars), min(quota, len(exemplars)), replace=False
            )
            bank[tid] = [exemplars[i] for i in sorted(keep)]
            for old in bank:
                if len(bank[old]) > quota:
                    idx = Rng(cfg.seed).child("shrink", old, stage).choice(
                        len(bank[old]), quota, replace=False
                    )
                    bank[old] = [bank[old][i] for i in sorted(idx)]
            task.train.lock()
            peak = max(peak, sum(len(v) for v in bank.values()))

            feats_list, labels = [], []
            for class_index, t in enumerate(task_order):
                b_images, _, _ = batch_arrays(bank[t], fsize)
                feats_list.append(pool_feature_array(backbone.encode_array(b_images), temperature))
                labels += [class_index] * len(bank[t])
            head = _SoftmaxHead(channels, stage, Rng(cfg.seed).child("head", stage))
            head.fit(np.concatenate(feats_list), np.array(labels),
                     cfg.classifier_epochs, Rng(cfg.seed).child("headfit", stage))

            for seen in stream[:stage]:
                s_samples = list(seen.test)
                s_images, s_masks, s_boxes = batch_arrays(s_samples, fsize)
                s_feats = backbone.encode_array(s_images)
                pooled = pool_feature_array(s_feats, temperature)
                pred_class = head.predict(pooled)
                band = default_band_width(s_images.shape[-2:])
                ious = np.zeros(len(s_samples))
                bious = np.zeros(len(s_samples))
                for class_index in set(pred_class.tolist()):
                    idx = np.nonzero(pred_class == class_index)[0]
                    chosen_layer = layers[task_order[class_index]]
                    logits = backbone.decode(
                        chosen_layer(Tensor(s_feats[idx])), Tensor(s_boxes[idx])
                    ).data
                    for j, i in enumerate(idx):
                        ious[i] = iou(logits[j, 0] > 0, s_masks[i, 0])
                        bious[i] = biou(logits[j, 0] > 0, s_masks[i, 0], band)
                    for i in idx:
                        sm.log_route(stage, seen.spec.task_id, task_order[class_index])
                sm.record(stage, seen.spec.task_id,
                          TaskEval(float(ious.mean()), float(bious.mean()), len(s_samples)))
    finally:
        _unlock_all(stream)
    result = StrategyResult(name="moda", stage_metrics=sm, stored_samples=peak)
    result.info["layers"] = layers
    result.info["task_order"] = task_order
    result.info["head"] = head
    return result


def run_emr(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """Task-vector merging: per-task layers trained from a common init, then
    elected into one unified increment; inference masks and rescales it per
    task. Stores parameters only, so it remains exemplar-free."""
    sm = StageMetrics()
    channels = backbone.config.feature_channels
    init_layer = _fresh_layer(channels, cfg, 0, tag="init")
    init_flat = init_layer.get_flat()
    vectors: dict[int, np.ndarray] = {}
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            layer = init_layer.clone()
            layer.task_id = tid
            train_alignment(
                task.train, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid),
            )
            vectors[tid] = layer.get_flat() - init_flat
            task.train.lock()

            unified = elect_unified_vector([vectors[t] for t in sorted(vectors)])
            for seen in stream[:stage]:
                stid = seen.spec.task_id
                merged, _lam = apply_task_mask(unified, vectors[stid])
                eval_layer = init_layer.clone()
                eval_layer.set_flat(init_flat + merged)
                sm.record(stage, stid,
                          evaluate_single_layer(backbone, eval_layer, seen.test))
    finally:
        _unlock_all(stream)
    return StrategyResult(name="emr", stage_metrics=sm)


def run_routed(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    """The full pipeline: per-task alignment layers, per-task VAEs with
    calibrated thresholds, and score-argmin routing with identity fallback.

    All per-task randomness is keyed by task id, so permuting the task order
    reproduces bitwise-identical adapters, VAEs, and thresholds.
    """
    sm = StageMetrics()
    rc = cfg.router
    channels = backbone.config.feature_channels
    pool = RouterPool(temperature=rc.temperature, rule=rc.rule)
    try:
        for stage, task in enumerate(stream, start=1):
            tid = task.spec.task_id
            layer = _fresh_layer(channels, cfg, tid)
            train_alignment(
                task.train, backbone, layer,
                epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                rng=Rng(cfg.seed).child("fit", tid),
            )
            images, _, _ = batch_arrays(list(task.train), backbone.config.feature_size)
            feats = pool_feature_array(backbone.encode_array(images), rc.temperature)
            vae, _ = train_vae(
                feats, beta=rc.beta, latent_dim=rc.latent_dim, hidden_dim=rc.hidden_dim,
                epochs=rc.epochs, lr=rc.lr, batch_size=rc.batch_size,
                rng=Rng(cfg.seed).child("vae", tid),
            )
            tau = calibrate_threshold(vae, feats, rc.k_folds, rc.rule,
                                      rng=Rng(cfg.seed).child("calibrate", tid))
            pool.add(tid, layer, vae, tau)
            task.train.lock()

            for seen in stream[:stage]:
                te, chosen = _evaluate_routed(backbone, pool, seen.test,
                                              seen.spec.task_id, cfg.oracle_routing)
                for c in chosen:
                    sm.log_route(stage, seen.spec.task_id, c)
                sm.record(stage, seen.spec.task_id, te)
    finally:
        _unlock_all(stream)
    return StrategyResult(name="routed", stage_metrics=sm, pool=pool)


STRATEGIES = {
    "naive": run_naive,
    "joint": run_joint,
    "lwf": run_lwf,
    "ewc": run_ewc,
    "er": run_er,
    "der": run_der,
    "l2p": run_l2p,
    "moda": run_moda,
    "emr": run_emr,
    "routed": run_routed,
}

# Exemplar-free flags (whether a strategy retains past samples).
EXEMPLAR_FREE = {
    "naive": True,
    "joint": True,
    "lwf": True,
    "ewc": True,
    "er": False,
    "der": False,
    "l2p": True,
    "moda": False,
    "emr": True,
    "routed": True,
}


def run_strategy(stream, backbone, cfg: StrategyConfig) -> StrategyResult:
    if cfg.name not in STRATEGIES:
        raise ValueError(f"unknown strategy {cfg.name!r}; available: {sorted(STRATEGIES)}")
    result = STRATEGIES[cfg.name](stream, backbone, cfg)
    if EXEMPLAR_FREE[cfg.name] and result.stored_samples:
        raise RuntimeError(
            f"{cfg.name} is declared exemplar-free but stored {result.stored_samples} samples"
        )
    return result
