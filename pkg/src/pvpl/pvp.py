"""Stage 1: class-specific visual prompt bank trained on text only.

One trainable H×W×3 tensor per class is pushed through the frozen image
encoder; its pooled feature is compared against frozen text features of
training sentences, and a pairwise ranking loss demands every positive
class outscore every negative class by a margin. Only the bank receives
gradients. After training, the bank itself is a zero-shot classifier:
score an image by its similarity to each encoded prompt.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat_rows, constant, gather, l2_normalize, relu, sgd_step
from .corpus import CategorySet, CorpusRecord
from .encoders import FrozenDualEncoder, encode_image, encode_text, tokenize


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the step where it happened."""


@dataclass
class PvpTrainConfig:
    margin: float = 1.0
    learning_rate: float = 8.0
    epochs: int = 16
    batch_size: int = 32
    similarity_scale: float = 4.0
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


@dataclass
class PvpBank:
    """The trainable prompt tensors, ordered like the category set."""

    prompts: list[Tensor]
    class_names: tuple[str, ...]
    init_seed: int

    def __len__(self) -> int:
        return len(self.prompts)

    def parameters(self) -> list[Tensor]:
        return self.prompts

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.prompts]


def bank_checksum(bank: PvpBank) -> str:
    h = hashlib.sha256()
    for name, p in zip(bank.class_names, bank.prompts):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def init_bank(
    categories: CategorySet,
    height: int,
    width: int,
    seed: int,
    patch_size: int | None = None,
) -> PvpBank:
    """One N(0, 0.02) prompt tensor per class.

    Each prompt's draw is keyed by its class name, so the initial bank of
    a permuted category set is the same bank, permuted.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"prompt size must be positive, got {height}×{width}")
    if patch_size is not None and (height % patch_size or width % patch_size):
        raise ValueError(
            f"prompt size {height}×{width} incompatible with patch size {patch_size}"
        )
    prompts = []
    for name in categories.names:
        key = hashlib.sha256(f"{seed}:pvp:{name}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(key[:8], "little"))
        prompts.append(Tensor(rng.normal(0.0, 0.02, size=(height, width, 3)), requires_grad=True))
    return PvpBank(prompts=prompts, class_names=categories.names, init_seed=seed)


def encode_bank_features(enc: FrozenDualEncoder, bank: PvpBank, frozen: bool = False) -> Tensor:
    """Encode every prompt; rows are unit-norm pooled features (N×D).

    With ``frozen=True`` the prompts are detached first, so no graph is
    kept and no gradient can reach the bank.
    """
    rows = []
    for p in bank.prompts:
        inp = p.detach() if frozen else p
        rows.append(encode_image(enc, inp).global_feature)
    return concat_rows(rows)


def pvp_similarities(
    enc: FrozenDualEncoder,
    bank: PvpBank,
    text_global: Tensor | np.ndarray,
    scale: float = 4.0,
) -> Tensor:
    """Scaled cosine similarity of a text feature against every encoded
    prompt; differentiable into the bank."""
    if not isinstance(text_global, Tensor):
        text_global = constant(np.asarray(text_global, dtype=np.float32))
    feats = encode_bank_features(enc, bank)
    return _scores_against(feats, text_global, scale)


def _scores_against(bank_feats: Tensor, query: Tensor, scale: float) -> Tensor:
    """scale * cosine of a unit query against unit feature rows."""
    q = l2_normalize(query).reshape((query.data.shape[0], 1))
    return (bank_feats @ q).reshape((bank_feats.data.shape[0],)) * scale


def ranking_loss(
    scores: Tensor,
    positives: set[int] | frozenset[int],
    negatives: set[int] | frozenset[int],
    margin: float,
) -> Tensor | None:
    """Sum of max(0, margin - s_pos + s_neg) over all positive/negative
    class pairs.

    Returns None when there is no positive class (skip-record signal) and
    a constant zero when there is no negative class (no pairs to rank).
    """
    if positives & negatives:
        raise ValueError(f"positive and negative sets overlap: {sorted(positives & negatives)}")
    if not positives:
        return None
    if not negatives:
        return constant(np.zeros((), dtype=scores.data.dtype))
    pos = gather(scores, sorted(positives)).reshape((len(positives), 1))
    neg = gather(scores, sorted(negatives)).reshape((1, len(negatives)))
    return relu((neg - pos) + margin).sum()


@dataclass
class PvpTrainResult:
    bank: PvpBank
    history: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, step, loss)
    skipped_records: int = 0

    def epoch_mean_losses(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for epoch, _, loss in self.history:
            sums.setdefault(epoch, []).append(loss)
        return [float(np.mean(sums[e])) for e in sorted(sums)]


def train_pvp(
    enc: FrozenDualEncoder,
    bank: PvpBank,
    records: list[CorpusRecord],
    config: PvpTrainConfig,
) -> PvpTrainResult:
    """Optimize the bank against frozen text features.

    Text features are precomputed once (the text encoder is frozen); each
    step re-encodes the bank, scores every record in the batch against
    all N prompts, and averages the per-record ranking losses. Gradients
    reach the prompt tensors only.
    """
    if not records:
        raise ValueError("training corpus is empty")
    n = len(bank)
    text_feats: list[np.ndarray] = []
    labels: list[frozenset[int]] = []
    for rec in records:
        text_feats.append(encode_text(enc, tokenize(enc, rec.sentence)).global_feature.data)
        labels.append(frozenset(i for i in rec.positive_labels if 0 <= i < n))

    rng = np.random.default_rng(config.seed)
    params = bank.parameters()
    velocities = None
    result = PvpTrainResult(bank=bank)
    all_classes = frozenset(range(n))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            feats = encode_bank_features(enc, bank)
            losses = []
            for idx in batch:
                pos = labels[int(idx)]
                if not pos:
                    result.skipped_records += 1
                    continue
                scores = _scores_against(feats, constant(text_feats[int(idx)]), config.similarity_scale)
                loss = ranking_loss(scores, pos, all_classes - pos, config.margin)
                if loss is None:
                    result.skipped_records += 1
                    continue
                losses.append(loss)
            if not losses:
                continue
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            total = total * (1.0 / len(losses))
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch} step {step}"
                )
            total.backward()
            velocities = sgd_step(
                params, [p.grad for p in params], config.learning_rate,
                momentum=config.momentum, velocities=velocities,
            )
            for p in params:
                p.grad = None
            if any(not np.all(np.isfinite(p.data)) for p in params):
                raise TrainingDivergedError(
                    f"non-finite prompt values after update at epoch {epoch} step {step}"
                )
            result.history.append((epoch, step, value))
            step += 1
    return result


def zero_shot_scores_pvp(
    enc: FrozenDualEncoder,
    bank: PvpBank,
    image: np.ndarray,
    scale: float = 4.0,
) -> np.ndarray:
    """Class scores for an image: scaled cosine against each encoded
    prompt, with the image feature in place of the text feature."""
    img_feat = encode_image(enc, np.asarray(image, dtype=np.float32)).global_feature
    feats = encode_bank_features(enc, bank, frozen=True)
    return _scores_against(feats, img_feat, scale).data.copy()
