"""Zero-shot multi-label inference and evaluation.

Inference uses only the text prompts (global branch adapted, local branch
raw) against image features; the visual prompt bank is not an input to
any scoring path here, so removing it from a checkpoint cannot change a
report. Scores fuse the global and local branches. Metrics are average
precision per class over the image axis and their mean, with a slow
sort-and-count oracle kept alongside the vectorized implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import constant
from .corpus import CategorySet, CorpusRecord, add_text_noise, augment_corpus, reasonableness_check
from .encoders import FrozenDualEncoder, encode_image
from .pvp import PvpBank, PvpTrainConfig, init_bank, train_pvp, zero_shot_scores_pvp
from .transfer import (
    DualAdapter,
    TextPromptSet,
    TransferConfig,
    global_scores,
    inference_embeddings,
    init_adapter,
    init_promptset,
    local_scores,
    train_transfer,
)


class EmptyEvaluationError(ValueError):
    """No class in the evaluation set has a positive example."""


@dataclass
class ScorePair:
    """Global scores p, local scores p', and their fusion."""

    global_scores: np.ndarray
    local_scores: np.ndarray
    fused: np.ndarray


@dataclass
class EvalReport:
    per_class_ap: list[float | None]
    mean_ap: float
    stage: str = ""
    config: dict = field(default_factory=dict)
    skipped_classes: int = 0

    def to_json(self) -> str:
        doc = {
            "per_class_ap": self.per_class_ap,
            "mean_ap": self.mean_ap,
            "stage": self.stage,
            "config": self.config,
            "skipped_classes": self.skipped_classes,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def to_table(self, class_names: tuple[str, ...] | None = None) -> str:
        lines = []
        if self.stage:
            lines.append(f"stage: {self.stage}")
        width = max([len("class")] + [len(n) for n in (class_names or ())])
        lines.append(f"{'class'.ljust(width)}  ap")
        for i, ap in enumerate(self.per_class_ap):
            name = class_names[i] if class_names else str(i)
            shown = "excluded" if ap is None else f"{ap:.6f}"
            lines.append(f"{name.ljust(width)}  {shown}")
        lines.append(f"{'mAP'.ljust(width)}  {self.mean_ap:.6f}")
        return "\n".join(lines) + "\n"


# -- inference ---------------------------------------------------------------


@dataclass
class InferenceModel:
    """Precomputed class embedding matrices for repeated scoring."""

    global_feats: np.ndarray  # N × D, adapted
    local_feats: np.ndarray   # N × D, raw
    scale: float = 4.0
    local_temperature: float = 0.05
    fusion_weight: float = 0.5


def prepare_inference(
    enc: FrozenDualEncoder,
    promptset: TextPromptSet,
    adapter: DualAdapter | None,
    scale: float = 4.0,
    local_temperature: float = 0.05,
    fusion_weight: float = 0.5,
) -> InferenceModel:
    g, l = inference_embeddings(enc, promptset, adapter)
    return InferenceModel(g, l, scale, local_temperature, fusion_weight)


def score_image(enc: FrozenDualEncoder, model: InferenceModel, image: np.ndarray) -> ScorePair:
    out = encode_image(enc, np.asarray(image, dtype=np.float32))
    p = global_scores(constant(model.global_feats), out.global_feature.data, model.scale).data.copy()
    p_prime = local_scores(
        constant(model.local_feats), out.sequence_features.data,
        model.scale, model.local_temperature,
    ).data.copy()
    fused = model.fusion_weight * p + (1.0 - model.fusion_weight) * p_prime
    return ScorePair(p, p_prime, fused)


def infer_image(
    enc: FrozenDualEncoder,
    promptset: TextPromptSet,
    adapter: DualAdapter | None,
    image: np.ndarray,
    scale: float = 4.0,
    local_temperature: float = 0.05,
    fusion_weight: float = 0.5,
) -> ScorePair:
    """Score one image against the text prompts.

    The visual prompt bank is deliberately not an argument: inference
    runs on the transferred text prompts alone.
    """
    model = prepare_inference(enc, promptset, adapter, scale, local_temperature, fusion_weight)
    return score_image(enc, model, image)


TTA_VIEW_POOL = ("hflip", "shift+2", "shift-2", "hflip_shift+2", "hflip_shift-2")


def _apply_view(image: np.ndarray, view: str) -> np.ndarray:
    out = image
    if "shift+2" in view:
        out = np.roll(out, 2, axis=1)
    elif "shift-2" in view:
        out = np.roll(out, -2, axis=1)
    if view.startswith("hflip"):
        out = out[:, ::-1, :]
    return out


def tta_scores(
    enc: FrozenDualEncoder,
    promptset: TextPromptSet,
    adapter: DualAdapter | None,
    image: np.ndarray,
    views: int = 5,
    seed: int = 0,
    scale: float = 4.0,
    local_temperature: float = 0.05,
    fusion_weight: float = 0.5,
) -> ScorePair:
    """Average scores over deterministic augmented views.

    The identity view is always included; the remaining views are drawn
    in a seed-selected order from horizontal flips and ±2px horizontal
    shifts (and their compositions).
    """
    if views < 1:
        raise ValueError(f"need at least one view, got {views}")
    model = prepare_inference(enc, promptset, adapter, scale, local_temperature, fusion_weight)
    chosen = _tta_views_for(views, seed)
    pairs = [score_image(enc, model, image)]
    for view in chosen:
        pairs.append(score_image(enc, model, _apply_view(image, view)))
    return ScorePair(
        global_scores=np.mean([s.global_scores for s in pairs], axis=0),
        local_scores=np.mean([s.local_scores for s in pairs], axis=0),
        fused=np.mean([s.fused for s in pairs], axis=0),
    )


def _tta_views_for(views: int, seed: int) -> list[str]:
    order = np.random.default_rng(seed).permutation(len(TTA_VIEW_POOL))
    return [TTA_VIEW_POOL[i] for i in order[: views - 1]]


def score_matrix(
    enc: FrozenDualEncoder,
    promptset: TextPromptSet,
    adapter: DualAdapter | None,
    images: np.ndarray,
    tta_views: int = 1,
    tta_seed: int = 0,
    scale: float = 4.0,
    local_temperature: float = 0.05,
    fusion_weight: float = 0.5,
) -> np.ndarray:
    """Fused scores for a stack of images (images × N)."""
    model = prepare_inference(enc, promptset, adapter, scale, local_temperature, fusion_weight)
    views = _tta_views_for(tta_views, tta_seed) if tta_views > 1 else []
    rows = []
    for image in images:
        fused = [score_image(enc, model, image).fused]
        fused += [score_image(enc, model, _apply_view(image, v)).fused for v in views]
        rows.append(np.mean(fused, axis=0))
    return np.stack(rows)


# -- metrics -------------------------------------------------------------------


def average_precision(scores, relevance) -> float | None:
    """AP = (1/m) Σ_{relevant ranks k} positives@k / k, scores descending,
    ties broken by original index. None when nothing is relevant."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if scores.shape != rel.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and relevance {rel.shape} must be equal-length vectors")
    m = int(rel.sum())
    if m == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = rel[order]
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum_hits[hits] / ranks[hits]).sum() / m)


def average_precision_bruteforce(scores, relevance) -> float | None:
    """Reference oracle: explicit sort-and-count, no vectorization."""
    items = sorted(
        [(float(s), i, bool(r)) for i, (s, r) in enumerate(zip(scores, relevance))],
        key=lambda t: (-t[0], t[1]),
    )
    m = sum(1 for _, _, r in items if r)
    if m == 0:
        return None
    total = 0.0
    positives = 0
    for k, (_, _, r) in enumerate(items, start=1):
        if r:
            positives += 1
            total += positives / k
    return total / m


def mean_average_precision(
    score_matrix: np.ndarray,
    label_matrix: np.ndarray,
    stage: str = "",
    config: dict | None = None,
) -> EvalReport:
    """Per-class AP over the image axis; mAP over classes with positives."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"score matrix {scores.shape} and labels {labels.shape} must match")
    per_class: list[float | None] = []
    kept = []
    for c in range(scores.shape[1]):
        ap = average_precision(scores[:, c], labels[:, c] > 0)
        per_class.append(ap)
        if ap is not None:
            kept.append(ap)
    if not kept:
        raise EmptyEvaluationError("no class has a positive example")
    return EvalReport(
        per_class_ap=per_class,
        mean_ap=float(np.mean(kept)),
        stage=stage,
        config=dict(config or {}),
        skipped_classes=len(per_class) - len(kept),
    )


# -- ablation -------------------------------------------------------------------

STAGE_ORDER = (
    "baseline",
    "augmentation",
    "reasonableness",
    "noise",
    "pvp",
    "transfer",
    "dual-adapter",
    "tta",
)


@dataclass
class AblationSettings:
    """Shared knobs for the cumulative pipeline behind each ablation row."""

    augment_factor: int = 2
    augment_seed: int = 8
    noise_rate: float = 0.3
    noise_seed: int = 9
    prompt_size: int = 32
    bank_seed: int = 3
    promptset_seed: int = 5
    adapter_seed: int = 6
    pvp_config: PvpTrainConfig = field(default_factory=PvpTrainConfig)
    transfer_config: TransferConfig = field(default_factory=TransferConfig)
    tta_views: int = 5
    tta_seed: int = 0
    fusion_weight: float = 0.5


def ablation_table(
    enc: FrozenDualEncoder,
    categories: CategorySet,
    records: list[CorpusRecord],
    stages: list[str],
    eval_images: np.ndarray,
    eval_labels: np.ndarray,
    settings: AblationSettings | None = None,
) -> list[tuple[str, float]]:
    """One mAP row per stage, applying stages cumulatively in the given
    order. Corpus rows retrain the text prompts on progressively cleaner
    data; the pvp row scores with the trained bank directly; later rows
    transfer into text prompts and add the adapter branches and TTA.
    """
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ValueError(f"unknown pipeline stages {unknown}; valid: {list(STAGE_ORDER)}")
    settings = settings or AblationSettings()
    cfg = settings.transfer_config

    active: set[str] = set()
    corpus = list(records)
    bank: PvpBank | None = None
    rows: list[tuple[str, float]] = []
    for stage in stages:
        active.add(stage)
        if stage == "augmentation":
            corpus = augment_corpus(categories, corpus, settings.augment_seed, settings.augment_factor)
        elif stage == "reasonableness":
            corpus, _ = reasonableness_check(categories, corpus)
        elif stage == "noise":
            corpus = add_text_noise(categories, corpus, settings.noise_seed, settings.noise_rate)

        if "pvp" in active and bank is None:
            bank = init_bank(categories, settings.prompt_size, settings.prompt_size,
                             settings.bank_seed, patch_size=enc.dims.patch_size)
            train_pvp(enc, bank, corpus, settings.pvp_config)

        if "pvp" in active and "transfer" not in active:
            scores = np.stack([
                zero_shot_scores_pvp(enc, bank, im, cfg.similarity_scale) for im in eval_images
            ])
        else:
            if "transfer" in active:
                mode = "dual" if "dual-adapter" in active else "text"
                weight_tpc = cfg.weight_tpc
            else:
                mode = "none"
                weight_tpc = 0.0
            stage_cfg = TransferConfig(
                temperature=cfg.temperature,
                local_temperature=cfg.local_temperature,
                weight_tpc=weight_tpc,
                weight_global=cfg.weight_global,
                weight_local=cfg.weight_local,
                margin=cfg.margin,
                similarity_scale=cfg.similarity_scale,
                learning_rate=cfg.learning_rate,
                adapter_learning_rate=cfg.adapter_learning_rate,
                visual_adapter_learning_rate=cfg.visual_adapter_learning_rate,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                context_length=cfg.context_length,
                adapter_hidden=cfg.adapter_hidden,
                alpha_init=cfg.alpha_init,
                adapter_mode=mode,
                momentum=cfg.momentum,
                seed=cfg.seed,
            )
            promptset = init_promptset(enc, cfg.context_length, settings.promptset_seed)
            adapter = init_adapter(enc.dims.d_latent, cfg.adapter_hidden, cfg.alpha_init,
                                   settings.adapter_seed)
            train_bank = bank
            if train_bank is None:
                # transfer without a trained bank is undefined; the stage
                # list is expected to enable pvp first
                train_bank = init_bank(categories, settings.prompt_size, settings.prompt_size,
                                       settings.bank_seed, patch_size=enc.dims.patch_size)
            train_transfer(enc, train_bank, promptset, adapter, corpus, stage_cfg)
            views = settings.tta_views if "tta" in active else 1
            scores = score_matrix(
                enc, promptset, adapter if mode != "none" else None, eval_images,
                tta_views=views, tta_seed=settings.tta_seed,
                scale=cfg.similarity_scale, local_temperature=cfg.local_temperature,
                fusion_weight=settings.fusion_weight,
            )
        report = mean_average_precision(scores, eval_labels, stage=stage)
        rows.append((stage, report.mean_ap))
    return rows


def ablation_csv(rows: list[tuple[str, float]]) -> str:
    lines = ["stage,map"]
    for stage, value in rows:
        lines.append(f"{stage},{value!r}")
    return "\n".join(lines) + "\n"
