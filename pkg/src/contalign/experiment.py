"""Experiment orchestration: reproducible runs, sweeps, and reports.

A run executes every configured strategy on one generated stream against a
cached frozen backbone, then writes per-strategy stage tables, a comparison
table, and a manifest with content hashes. Identical configs and seeds
produce byte-identical output trees; a failing strategy is recorded as
failed without disturbing the others.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .alignment import AlignmentLayer
from .backbone import FrozenBackbone, pretrain_backbone
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .data import (
    OOD_TASK_PARAMS,
    SampleList,
    StreamTask,
    generate_stream,
    make_task_spec,
    render_sample,
    sample_pretraining_batch,
)
from .io import load_backbone, save_alignment, save_backbone, save_pool
from .metrics import (
    aggregate_summary,
    routing_accuracy,
    routing_log_to_csv,
    stage_metrics_to_csv,
)
from .nn import Rng, Tensor
from .router import (
    OOD,
    RouterPool,
    calibration_scores,
    make_pooler,
    route,
    score_features,
    threshold_from_scores,
    train_vae,
)
from .strategies import (
    EXEMPLAR_FREE,
    StrategyConfig,
    StrategyResult,
    evaluate_single_layer,
    run_strategy,
    train_alignment,
)
from .training import batch_arrays

__all__ = [
    "backbone_cache_key",
    "ensure_backbone",
    "build_stream",
    "build_ood_samples",
    "run_experiment",
    "ablation_sweep",
    "emit_comparison",
    "score_pool_on_dataset",
    "COMPARISON_HEADER",
]

COMPARISON_HEADER = "method,EF,Last-IoU,Avg-IoU,FF-IoU,Last-BIoU,Avg-BIoU,FF-BIoU"

SWEEP_AXES = ("temperature", "beta", "tau_rule", "pooling", "n_blocks")

DEFAULT_SWEEP_GRIDS = {
    "temperature": (0.5, 1.0, 2.0, 4.0),
    "beta": (0.0, 4.0, 16.5),
    "tau_rule": ("mu_plus_2sigma", "p95", "p97", "p99"),
    "pooling": ("attention", "gap", "mean", "flatten", "attention_learned", "cls"),
    "n_blocks": (1, 2, 4, 8),
}


def backbone_cache_key(config: ExperimentConfig) -> str:
    blob = json.dumps(
        {"backbone": config.backbone.__dict__, "seed": config.backbone_seed},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def ensure_backbone(config: ExperimentConfig, cache_dir) -> tuple[FrozenBackbone, Path]:
    """Load the cached backbone for this config, pretraining it on a miss."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"backbone_{backbone_cache_key(config)}.bin"
    if path.exists():
        return load_backbone(path), path
    if not config.allow_pretrain:
        raise FileNotFoundError(
            f"no cached backbone at {path} and pretraining is disabled for this run"
        )
    backbone = pretrain_backbone(config.backbone, config.backbone_seed)
    save_backbone(path, backbone)
    return backbone, path


def build_stream(config: ExperimentConfig) -> list[StreamTask]:
    return generate_stream(
        config.stream.n_tasks,
        config.stream.per_task_train,
        config.stream.per_task_test,
        config.master_seed,
        image_size=config.stream.image_size,
    )


OOD_TASK_ID = 9  # roster slot reserved for the held-out unseen-domain task


def build_ood_samples(config: ExperimentConfig) -> list:
    """Unseen-domain probes: the held-out OOD task plus pretraining-mixture
    samples (both foreign to every trained task)."""
    spec = make_task_spec(OOD_TASK_ID, config.master_seed, OOD_TASK_PARAMS,
                          config.stream.image_size)
    rng = Rng(spec.seed)
    samples = [render_sample(spec, rng.child("ood", i))
               for i in range(config.ood.n_task_samples)]
    samples += sample_pretraining_batch(
        config.ood.n_mixture_samples, Rng(config.master_seed).child("oodmix"),
        config.stream.image_size,
    )
    return samples


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _evaluate_pool_on_ood(backbone: FrozenBackbone, pool: RouterPool, samples) -> dict:
    from .metrics import RouteRecord, biou, default_band_width, iou

    images, masks, boxes = batch_arrays(samples, backbone.config.feature_size)
    features = backbone.encode_array(images)
    identity = AlignmentLayer.identity()
    band = default_band_width(images.shape[-2:])
    decisions = [route(pool, features[i]) for i in range(len(samples))]
    routed_iou, identity_iou = [], []
    rejections = 0
    for i, decision in enumerate(decisions):
        layer = pool.layer_for(decision)
        logits = backbone.decode(layer(Tensor(features[i][None])), Tensor(boxes[i][None])).data
        routed_iou.append(iou(logits[0, 0] > 0, masks[i, 0]))
        id_logits = backbone.decode(identity(Tensor(features[i][None])), Tensor(boxes[i][None])).data
        identity_iou.append(iou(id_logits[0, 0] > 0, masks[i, 0]))
        rejections += decision.is_ood
    return {
        "routed_iou": round(float(np.mean(routed_iou)), 6),
        "identity_iou": round(float(np.mean(identity_iou)), 6),
        "rejection_rate": round(rejections / len(samples), 6),
        "n": len(samples),
    }


def _evaluate_moda_on_ood(backbone: FrozenBackbone, result: StrategyResult, samples,
                          temperature: float) -> dict:
    from .metrics import iou
    from .router import pool_feature_array

    head = result.info["head"]
    layers = result.info["layers"]
    task_order = result.info["task_order"]
    images, masks, boxes = batch_arrays(samples, backbone.config.feature_size)
    features = backbone.encode_array(images)
    pooled = pool_feature_array(features, temperature)
    pred = head.predict(pooled)
    identity = AlignmentLayer.identity()
    routed_iou, identity_iou = [], []
    for i in range(len(samples)):
        layer = layers[task_order[int(pred[i])]]
        logits = backbone.decode(layer(Tensor(features[i][None])), Tensor(boxes[i][None])).data
        routed_iou.append(iou(logits[0, 0] > 0, masks[i, 0]))
        id_logits = backbone.decode(identity(Tensor(features[i][None])), Tensor(boxes[i][None])).data
        identity_iou.append(iou(id_logits[0, 0] > 0, masks[i, 0]))
    return {
        "routed_iou": round(float(np.mean(routed_iou)), 6),
        "identity_iou": round(float(np.mean(identity_iou)), 6),
        "rejection_rate": 0.0,  # hard routing has no fallback branch
        "n": len(samples),
    }


def _save_strategy_checkpoints(directory: Path, result: StrategyResult) -> None:
    if result.pool is not None:
        save_pool(directory / "pool", result.pool)
    layers = result.info.get("layers")
    if layers:
        for key in sorted(layers, key=str):
            save_alignment(directory / f"alignment_{key}.bin", layers[key])


def run_one_strategy(config_dict: dict, strategy_index: int, backbone_path: str,
                     out_dir: str) -> dict:
    """Worker entry point: run one strategy and write its artifact directory.

    Returns the summary payload (also written to summary.json).
    """
    config = config_from_dict(config_dict)
    cfg = config.strategies[strategy_index]
    directory = Path(out_dir) / "strategies" / cfg.name
    directory.mkdir(parents=True, exist_ok=True)
    backbone = load_backbone(backbone_path)
    stream = build_stream(config)
    pre_hash = backbone.parameter_hash()

    result = run_strategy(stream, backbone, cfg)
    if backbone.parameter_hash() != pre_hash:
        raise RuntimeError(f"backbone parameters changed during {cfg.name}")

    sm = result.stage_metrics
    (directory / "stage_metrics.csv").write_text(stage_metrics_to_csv(sm))
    if sm.routing_log:
        (directory / "routing_log.csv").write_text(routing_log_to_csv(sm.routing_log))

    summary = {
        "strategy": cfg.name,
        "exemplar_free": EXEMPLAR_FREE[cfg.name],
        "stored_samples": result.stored_samples,
        "aggregates": aggregate_summary(sm),
    }
    if sm.routing_log:
        acc = routing_accuracy(sm.routing_log)
        summary["routing"] = {
            "in_distribution": None if acc["in_distribution"] is None
            else round(acc["in_distribution"], 6),
            "ood": None if acc["ood"] is None else round(acc["ood"], 6),
        }

    ood_samples = build_ood_samples(config)
    if result.pool is not None:
        summary["ood_eval"] = _evaluate_pool_on_ood(backbone, result.pool, ood_samples)
    elif cfg.name == "moda":
        summary["ood_eval"] = _evaluate_moda_on_ood(backbone, result, ood_samples,
                                                    cfg.router.temperature)

    _save_strategy_checkpoints(directory, result)
    _json_dump(directory / "summary.json", summary)
    return summary


def emit_comparison(out_dir: Path, summaries: dict[str, dict]) -> Path:
    """Comparison table in the Last/Avg/FF column layout for IoU and BIoU."""
    lines = [COMPARISON_HEADER]
    for name in sorted(summaries):
        s = summaries[name]
        a = s["aggregates"]
        ef = "yes" if s["exemplar_free"] else "no"
        lines.append(
            f"{name},{ef},{a['last_iou']:.6f},{a['avg_iou']:.6f},{a['ff_iou']:.6f},"
            f"{a['last_biou']:.6f},{a['avg_biou']:.6f},{a['ff_biou']:.6f}"
        )
    path = out_dir / "comparison.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_experiment(config: ExperimentConfig, out_dir, *, jobs: int = 1,
                   cache_dir=None) -> dict:
    """Execute every configured strategy; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    backbone, backbone_path = ensure_backbone(config, cache_dir)

    config_dict = config_to_dict(config)
    statuses: dict[str, dict] = {}
    summaries: dict[str, dict] = {}

    indexed = list(enumerate(config.strategies))
    if jobs > 1 and len(indexed) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                cfg.name: pool.submit(run_one_strategy, config_dict, i,
                                      str(backbone_path), str(out_dir))
                for i, cfg in indexed
            }
            for name, future in futures.items():
                try:
                    summaries[name] = future.result()
                    statuses[name] = {"status": "ok"}
                except Exception as exc:  # noqa: BLE001 - crash isolation
                    statuses[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    else:
        for i, cfg in indexed:
            try:
                summaries[cfg.name] = run_one_strategy(config_dict, i,
                                                       str(backbone_path), str(out_dir))
                statuses[cfg.name] = {"status": "ok"}
            except Exception as exc:  # noqa: BLE001 - crash isolation
                statuses[cfg.name] = {
                    "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                }

    emit_comparison(out_dir, summaries)

    # zero-shot reference row: the frozen backbone with the identity layer
    stream = build_stream(config)
    identity = AlignmentLayer.identity()
    zero_shot = {
        task.spec.task_id: round(
            evaluate_single_layer(backbone, identity, task.test.raw()).iou, 6
        )
        for task in stream
    }

    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json" and "cache" not in path.parts:
            files[str(path.relative_to(out_dir))] = _sha256(path)

    manifest = {
        "schema_version": config.schema_version,
        "config": config_dict,
        "backbone": {
            "cache_key": backbone_cache_key(config),
            "holdout_iou": round(backbone.holdout_iou, 6),
            "parameter_hash": backbone.parameter_hash(),
        },
        "zero_shot_iou": zero_shot,
        "strategies": statuses,
        "files": files,
        "all_ok": all(s["status"] == "ok" for s in statuses.values()),
    }
    _json_dump(out_dir / "manifest.json", manifest)
    return manifest


# -- ablation sweeps -------------------------------------------------------------------


def _base_strategy(config: ExperimentConfig, n_blocks: int | None = None) -> StrategyConfig:
    """The routed strategy's settings (falling back to defaults), which the
    sweeps reuse for adapter training."""
    for s in config.strategies:
        if s.name == "routed":
            base = s
            break
    else:
        base = StrategyConfig(name="routed", seed=config.master_seed,
                              router=config.router)
    if n_blocks is not None:
        from dataclasses import replace

        base = replace(base, n_blocks=n_blocks)
    return base


def _routed_assets(config: ExperimentConfig, backbone: FrozenBackbone,
                   n_blocks: int | None = None):
    """Adapters plus per-task pooled features, shared across sweep points."""
    stream = build_stream(config)
    rc = config.router
    seed = config.master_seed
    layers: dict[int, AlignmentLayer] = {}
    raw_features: dict[int, np.ndarray] = {}
    channels = backbone.config.feature_channels
    base = _base_strategy(config, n_blocks)
    for task in stream:
        tid = task.spec.task_id
        layer = AlignmentLayer(channels, base.n_blocks, tid, Rng(seed).child("layer", tid))
        train_alignment(
            task.train.raw(), backbone, layer,
            epochs=base.epochs, lr=base.lr, batch_size=base.batch_size,
            rng=Rng(seed).child("fit", tid),
        )
        layers[tid] = layer
        images, _, _ = batch_arrays(task.train.raw(), backbone.config.feature_size)
        raw_features[tid] = backbone.encode_array(images)
    test_features = {}
    for task in stream:
        images, _, _ = batch_arrays(task.test.raw(), backbone.config.feature_size)
        test_features[task.spec.task_id] = backbone.encode_array(images)
    ood_samples = build_ood_samples(config)
    ood_images, _, _ = batch_arrays(ood_samples, backbone.config.feature_size)
    ood_features = backbone.encode_array(ood_images)
    return stream, layers, raw_features, test_features, ood_features


def _routing_quality(vaes: dict[int, object], taus: dict[int, float],
                     test_features: dict[int, np.ndarray],
                     ood_features: np.ndarray,
                     poolers: dict[int, object]) -> dict:
    """Routing accuracy with per-task (vae, pooler) scoring pipelines."""
    task_ids = sorted(vaes)
    tau_vec = np.array([taus[t] for t in task_ids])
    correct = total = 0
    for tid, maps in test_features.items():
        scores = np.stack(
            [score_features(vaes[t], poolers[t](maps)) for t in task_ids], axis=1
        )
        best = scores.argmin(axis=1)
        accepted = scores.min(axis=1) <= tau_vec[best]
        correct += int((accepted & (np.array(task_ids)[best] == tid)).sum())
        total += len(maps)
    scores = np.stack(
        [score_features(vaes[t], poolers[t](ood_features)) for t in task_ids], axis=1
    )
    rejected = scores.min(axis=1) > tau_vec[scores.argmin(axis=1)]
    return {
        "id_accuracy": round(correct / total, 6),
        "ood_rejection": round(float(rejected.mean()), 6),
    }


def ablation_sweep(config: ExperimentConfig, axis: str, out_dir, *,
                   grid=None, cache_dir=None) -> Path:
    """One run per grid point along a single ablation axis; adapters are
    trained once and reused wherever the axis does not touch them."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; use one of {SWEEP_AXES}")
    grid = tuple(grid) if grid is not None else DEFAULT_SWEEP_GRIDS[axis]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    backbone, _ = ensure_backbone(config, cache_dir)
    rc = config.router
    seed = config.master_seed

    rows: list[dict] = []
    if axis == "n_blocks":
        # single-task fitting-capacity ablation: train task 0's adapter at
        # each depth and report its test IoU
        stream = build_stream(config)
        task = stream[0]
        base = _base_strategy(config)
        for n_blocks in grid:
            layer = AlignmentLayer(backbone.config.feature_channels, int(n_blocks),
                                   task.spec.task_id, Rng(seed).child("ab", n_blocks))
            history = train_alignment(
                task.train.raw(), backbone, layer,
                epochs=base.epochs, lr=base.lr, batch_size=base.batch_size,
                rng=Rng(seed).child("abfit", n_blocks),
            )
            te = evaluate_single_layer(backbone, layer, task.test.raw())
            rows.append({
                "n_blocks": int(n_blocks),
                "task0_iou": round(te.iou, 6),
                "task0_biou": round(te.biou, 6),
                "final_train_loss": round(history[-1], 6),
            })
        header = "n_blocks,task0_iou,task0_biou,final_train_loss"
        fmt = lambda r: f"{r['n_blocks']},{r['task0_iou']:.6f},{r['task0_biou']:.6f},{r['final_train_loss']:.6f}"
    else:
        stream, layers, raw_features, test_features, ood_features = _routed_assets(
            config, backbone
        )
        feature_shape = backbone.feature_shape

        def fit_router(beta, temperature, rule, pooler_kind):
            vaes, taus, fold_scores, poolers = {}, {}, {}, {}
            for tid, maps in raw_features.items():
                pooler = make_pooler(pooler_kind, feature_shape, temperature,
                                     Rng(seed).child("pooler", pooler_kind, tid))
                if pooler_kind in ("attention_learned", "cls"):
                    vae, _ = train_vae(
                        None, beta=beta, latent_dim=rc.latent_dim,
                        hidden_dim=rc.hidden_dim, epochs=rc.epochs, lr=rc.lr,
                        batch_size=rc.batch_size, rng=Rng(seed).child("vae", tid),
                        pooler=pooler, feature_maps=maps,
                    )
                    feats = pooler(maps)
                else:
                    feats = pooler(maps)
                    vae, _ = train_vae(
                        feats, beta=beta, latent_dim=rc.latent_dim,
                        hidden_dim=rc.hidden_dim, epochs=rc.epochs, lr=rc.lr,
                        batch_size=rc.batch_size, rng=Rng(seed).child("vae", tid),
                    )
                scores = calibration_scores(vae, feats, rc.k_folds,
                                            rng=Rng(seed).child("calibrate", tid))
                vaes[tid] = vae
                taus[tid] = threshold_from_scores(scores, rule)
                fold_scores[tid] = scores
                poolers[tid] = pooler
            return vaes, taus, fold_scores, poolers

        if axis == "temperature":
            for temp in grid:
                vaes, taus, _, poolers = fit_router(rc.beta, float(temp), rc.rule, "attention")
                q = _routing_quality(vaes, taus, test_features, ood_features, poolers)
                rows.append({"temperature": float(temp), **q})
            header = "temperature,id_accuracy,ood_rejection"
            fmt = lambda r: f"{r['temperature']},{r['id_accuracy']:.6f},{r['ood_rejection']:.6f}"
        elif axis == "beta":
            for beta in grid:
                vaes, taus, _, poolers = fit_router(float(beta), rc.temperature, rc.rule, "attention")
                q = _routing_quality(vaes, taus, test_features, ood_features, poolers)
                rows.append({"beta": float(beta), **q})
            header = "beta,id_accuracy,ood_rejection"
            fmt = lambda r: f"{r['beta']},{r['id_accuracy']:.6f},{r['ood_rejection']:.6f}"
        elif axis == "tau_rule":
            vaes, _, fold_scores, poolers = fit_router(rc.beta, rc.temperature, rc.rule, "attention")
            for rule in grid:
                taus = {tid: threshold_from_scores(s, rule) for tid, s in fold_scores.items()}
                q = _routing_quality(vaes, taus, test_features, ood_features, poolers)
                row = {"rule": rule, **q}
                for tid in sorted(taus):
                    row[f"tau_task{tid}"] = round(taus[tid], 6)
                rows.append(row)
            task_cols = ",".join(f"tau_task{tid}" for tid in sorted(fold_scores))
            header = f"rule,id_accuracy,ood_rejection,{task_cols}"
            fmt = lambda r: ",".join(
                [r["rule"], f"{r['id_accuracy']:.6f}", f"{r['ood_rejection']:.6f}"]
                + [f"{r[k]:.6f}" for k in sorted(r) if k.startswith("tau_task")]
            )
        else:  # pooling
            for kind in grid:
                vaes, taus, _, poolers = fit_router(rc.beta, rc.temperature, rc.rule, kind)
                q = _routing_quality(vaes, taus, test_features, ood_features, poolers)
                rows.append({"pooling": kind, **q})
            header = "pooling,id_accuracy,ood_rejection"
            fmt = lambda r: f"{r['pooling']},{r['id_accuracy']:.6f},{r['ood_rejection']:.6f}"

    path = out_dir / f"sweep_{axis}.csv"
    path.write_text("\n".join([header] + [fmt(r) for r in rows]) + "\n")
    _json_dump(out_dir / f"sweep_{axis}.json", {"axis": axis, "rows": rows})
    return path


# -- scoring a saved pool against an exported dataset -------------------------------


def score_pool_on_dataset(pool: RouterPool, backbone: FrozenBackbone,
                          stream: list[StreamTask]) -> dict:
    """Route every test sample of an imported dataset through a saved pool."""
    records = []
    per_task = {}
    for task in stream:
        images, _, _ = batch_arrays(task.test.raw(), backbone.config.feature_size)
        features = backbone.encode_array(images)
        decisions = [route(pool, features[i]) for i in range(len(features))]
        chosen = [d.chosen for d in decisions]
        records += [
            {"task": task.spec.task_id, "chosen": c,
             "score": round(min(d.scores.values()), 6)}
            for c, d in zip(chosen, decisions)
        ]
        known = task.spec.task_id in pool.entries
        hits = sum(c == task.spec.task_id for c in chosen) if known else \
            sum(c == OOD for c in chosen)
        per_task[task.spec.task_id] = {
            "n": len(chosen),
            "accuracy": round(hits / len(chosen), 6),
            "expected": "self" if known else "fallback",
        }
    return {"per_task": per_task, "decisions": records}
