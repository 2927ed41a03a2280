"""Stage 2: move the knowledge stored in the visual prompt bank into text
prompts.

Each class gets its text features from a shared learnable context (one
set for global scoring, one for local scoring) prepended to its frozen
class word embedding and run through the frozen text encoder. A dual
adapter (one small residual MLP per branch) reshapes the text-prompt
features and the encoded bank features; an N×N symmetric contrastive
loss with diagonal targets pulls matching pairs together. Ranking losses
on the text corpus train the same prompts for multi-label scoring. The
bank and the encoders stay frozen throughout; gradients reach only the
contexts and the adapter.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat_rows,
    constant,
    cross_entropy,
    gather,
    l2_normalize,
    matmul,
    relu,
    sgd_step,
    softmax,
    tsum,
)
from .corpus import CorpusRecord
from .encoders import EOS_ID, FrozenDualEncoder, encode_embeddings, encode_text, tokenize
from .pvp import PvpBank, TrainingDivergedError, encode_bank_features, ranking_loss


@dataclass
class TransferConfig:
    temperature: float = 0.2
    local_temperature: float = 0.05
    weight_tpc: float = 1.0
    weight_global: float = 1.0
    weight_local: float = 1.0
    margin: float = 0.5
    similarity_scale: float = 4.0
    learning_rate: float = 0.03
    adapter_learning_rate: float | None = None         # defaults to learning_rate / 3
    visual_adapter_learning_rate: float | None = None  # defaults to adapter lr / 10
    epochs: int = 12
    batch_size: int = 32
    context_length: int = 8
    adapter_hidden: int = 32
    alpha_init: float = 0.2
    adapter_mode: str = "dual"  # none | text | dual
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.local_temperature <= 0:
            raise ValueError(f"local temperature must be positive, got {self.local_temperature}")
        if self.adapter_mode not in ("none", "text", "dual"):
            raise ValueError(f"unknown adapter mode '{self.adapter_mode}'")


@dataclass
class TextPromptSet:
    """Learnable shared contexts plus frozen per-class word embeddings."""

    global_context: Tensor           # M × d_embed
    local_context: Tensor            # M × d_embed
    class_word_embeddings: np.ndarray  # N × d_embed, frozen
    class_names: tuple[str, ...]
    init_seed: int

    @property
    def context_length(self) -> int:
        return self.global_context.data.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.global_context, self.local_context]


@dataclass
class DualAdapter:
    """Two residual MLP branches (text / visual) with learnable blend.

    Output = normalize((1 - alpha) * F + alpha * MLP2(ReLU(MLP1(F)))),
    so alpha = 0 reproduces the frozen-encoder features exactly.
    """

    text_w1: Tensor
    text_b1: Tensor
    text_w2: Tensor
    text_b2: Tensor
    text_alpha: Tensor
    visual_w1: Tensor
    visual_b1: Tensor
    visual_w2: Tensor
    visual_b2: Tensor
    visual_alpha: Tensor

    def branch(self, name: str) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        if name == "text":
            return self.text_w1, self.text_b1, self.text_w2, self.text_b2, self.text_alpha
        if name == "visual":
            return self.visual_w1, self.visual_b1, self.visual_w2, self.visual_b2, self.visual_alpha
        raise ValueError(f"unknown adapter branch '{name}'")

    def parameters(self) -> list[Tensor]:
        return [
            self.text_w1, self.text_b1, self.text_w2, self.text_b2, self.text_alpha,
            self.visual_w1, self.visual_b1, self.visual_w2, self.visual_b2, self.visual_alpha,
        ]


def promptset_checksum(promptset: TextPromptSet) -> str:
    h = hashlib.sha256()
    h.update(promptset.global_context.data.tobytes())
    h.update(promptset.local_context.data.tobytes())
    h.update(promptset.class_word_embeddings.tobytes())
    return h.hexdigest()


def init_promptset(enc: FrozenDualEncoder, context_length: int, seed: int) -> TextPromptSet:
    rng = np.random.default_rng(seed)
    shape = (context_length, enc.dims.d_embed)
    return TextPromptSet(
        global_context=Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True),
        local_context=Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True),
        class_word_embeddings=enc.class_word_embeddings(),
        class_names=enc.class_names,
        init_seed=seed,
    )


def init_adapter(d_latent: int, hidden: int, alpha_init: float, seed: int) -> DualAdapter:
    rng = np.random.default_rng(seed)

    def affine(n_in, n_out):
        w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)
        b = Tensor(np.zeros(n_out), requires_grad=True)
        return w, b

    tw1, tb1 = affine(d_latent, hidden)
    tw2, tb2 = affine(hidden, d_latent)
    vw1, vb1 = affine(d_latent, hidden)
    vw2, vb2 = affine(hidden, d_latent)
    return DualAdapter(
        text_w1=tw1, text_b1=tb1, text_w2=tw2, text_b2=tb2,
        text_alpha=Tensor(np.asarray(alpha_init), requires_grad=True),
        visual_w1=vw1, visual_b1=vb1, visual_w2=vw2, visual_b2=vb2,
        visual_alpha=Tensor(np.asarray(alpha_init), requires_grad=True),
    )


# -- forward pieces -----------------------------------------------------------


def class_embeddings(enc: FrozenDualEncoder, promptset: TextPromptSet) -> tuple[Tensor, Tensor]:
    """Encode [context..., class word, <EOS>] per class for both context
    sets; rows are unit-norm, ordered by class index, and all share the
    same context tensors."""
    eos_row = constant(enc.token_embedding[EOS_ID].reshape(1, -1))

    def encode_with(context: Tensor) -> Tensor:
        rows = []
        read_pos = context.data.shape[0] + 1
        for i in range(len(promptset.class_names)):
            word = constant(promptset.class_word_embeddings[i].reshape(1, -1))
            seq = concat_rows([context, word, eos_row])
            rows.append(encode_embeddings(enc, seq, read_pos=read_pos).global_feature)
        return concat_rows(rows)

    return encode_with(promptset.global_context), encode_with(promptset.local_context)


def global_scores(class_feats: Tensor, text_global, scale: float = 4.0) -> Tensor:
    """Scaled cosine of a pooled feature against each class row."""
    if not isinstance(text_global, Tensor):
        text_global = constant(np.asarray(text_global, dtype=np.float32))
    q = l2_normalize(text_global).reshape((text_global.data.shape[0], 1))
    return (class_feats @ q).reshape((class_feats.data.shape[0],)) * scale


def local_scores(
    class_feats: Tensor,
    sequence_feats,
    scale: float = 4.0,
    local_temperature: float = 0.1,
) -> Tensor:
    """Softmax-weighted aggregation of per-token similarities.

    For each class, similarities against every sequence position are
    weighted by a softmax over positions (sharpened by the local
    temperature) and summed; a single-position sequence reduces to the
    plain scaled similarity.
    """
    if not isinstance(sequence_feats, Tensor):
        sequence_feats = constant(np.asarray(sequence_feats, dtype=np.float32))
    if sequence_feats.data.ndim != 2 or sequence_feats.data.shape[0] == 0:
        raise ShapeError(f"sequence features must be a nonempty L×D matrix, got {sequence_feats.shape}")
    sims = class_feats @ l2_normalize(sequence_feats).T  # N × L cosines
    weights = softmax(sims, temperature=local_temperature)
    return tsum(weights * sims, axis=1) * scale


def tpc_loss(f_text: Tensor, f_visual: Tensor, temperature: float) -> Tensor:
    """Symmetric contrastive cross-entropy over the N×N similarity matrix
    with diagonal targets; both directions are summed."""
    n = f_text.data.shape[0]
    if n < 2:
        raise ValueError(f"contrastive transfer needs at least 2 classes, got {n}")
    if f_visual.data.shape != f_text.data.shape:
        raise ShapeError(f"feature shapes differ: {f_text.shape} vs {f_visual.shape}")
    sim = f_text @ f_visual.T
    assert sim.data.shape == (n, n)
    inv_t = 1.0 / temperature
    total = None
    for i in range(n):
        row = gather(sim, [i]).reshape((n,)) * inv_t
        col = gather(sim.T, [i]).reshape((n,)) * inv_t
        term = cross_entropy(row, i) + cross_entropy(col, i)
        total = term if total is None else total + term
    return total


def apply_adapter(adapter: DualAdapter, branch: str, feats: Tensor) -> Tensor:
    """Residual adapter pass; rows come out unit-normalized."""
    w1, b1, w2, b2, alpha = adapter.branch(branch)
    mlp = matmul(relu(matmul(feats, w1) + b1), w2) + b2
    blended = feats * (1.0 - alpha) + mlp * alpha
    return l2_normalize(blended)


# -- training -----------------------------------------------------------------


@dataclass
class TransferResult:
    promptset: TextPromptSet
    adapter: DualAdapter
    # (epoch, step, total, tpc, global, local)
    history: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)
    similarity_shape_checks: int = 0
    skipped_records: int = 0

    def epoch_mean_losses(self) -> list[float]:
        sums: dict[int, list[float]] = {}
        for epoch, _, total, *_ in self.history:
            sums.setdefault(epoch, []).append(total)
        return [float(np.mean(sums[e])) for e in sorted(sums)]


def train_transfer(
    enc: FrozenDualEncoder,
    bank: PvpBank,
    promptset: TextPromptSet,
    adapter: DualAdapter,
    records: list[CorpusRecord],
    config: TransferConfig,
) -> TransferResult:
    """Joint training of contexts and adapter on text records plus the
    frozen bank.

    Per step: the N×N text/visual similarity matrix feeds the contrastive
    term (its shape is asserted every step, independent of batch size),
    and each batch record contributes global and local ranking losses.
    Bank features are encoded once up front since the bank is frozen.
    """
    if not records:
        raise ValueError("training corpus is empty")
    n = len(promptset.class_names)
    bank_feats = encode_bank_features(enc, bank, frozen=True).data.copy()

    text_globals: list[np.ndarray] = []
    text_seqs: list[np.ndarray] = []
    labels: list[frozenset[int]] = []
    for rec in records:
        out = encode_text(enc, tokenize(enc, rec.sentence))
        text_globals.append(out.global_feature.data)
        seq = out.sequence_features.data
        text_seqs.append(seq / np.linalg.norm(seq, axis=-1, keepdims=True))
        labels.append(frozenset(i for i in rec.positive_labels if 0 <= i < n))

    adapt_text = config.adapter_mode in ("text", "dual")
    adapt_visual = config.adapter_mode == "dual"
    context_params = list(promptset.parameters())
    text_ad_params = []
    visual_ad_params = []
    if adapt_text:
        text_ad_params = [adapter.text_w1, adapter.text_b1, adapter.text_w2,
                          adapter.text_b2, adapter.text_alpha]
    if adapt_visual:
        visual_ad_params = [adapter.visual_w1, adapter.visual_b1, adapter.visual_w2,
                            adapter.visual_b2, adapter.visual_alpha]
    params = context_params + text_ad_params + visual_ad_params
    adapter_lr = (
        config.adapter_learning_rate
        if config.adapter_learning_rate is not None
        else config.learning_rate / 3.0
    )
    # the visual branch reshapes the contrastive targets themselves; it
    # has to move much slower than the text side or the two branches
    # chase each other instead of converging
    visual_lr = (
        config.visual_adapter_learning_rate
        if config.visual_adapter_learning_rate is not None
        else adapter_lr / 10.0
    )
    rng = np.random.default_rng(config.seed)
    ctx_velocities = None
    ad_velocities = None
    vis_velocities = None
    result = TransferResult(promptset=promptset, adapter=adapter)
    all_classes = frozenset(range(n))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            g_feats, l_feats = class_embeddings(enc, promptset)
            f_text = apply_adapter(adapter, "text", g_feats) if adapt_text else g_feats

            terms = []
            tpc_value = 0.0
            if config.weight_tpc != 0.0:
                f_visual = constant(bank_feats)
                if adapt_visual:
                    f_visual = apply_adapter(adapter, "visual", f_visual)
                sim_shape = (f_text.data.shape[0], f_visual.data.shape[0])
                if sim_shape != (n, n):
                    raise ShapeError(f"similarity matrix must be {n}×{n}, got {sim_shape}")
                result.similarity_shape_checks += 1
                tpc = tpc_loss(f_text, f_visual, config.temperature)
                tpc_value = tpc.item()
                terms.append(tpc * config.weight_tpc)

            global_losses = []
            local_losses = []
            for idx in batch:
                pos = labels[int(idx)]
                if not pos:
                    result.skipped_records += 1
                    continue
                neg = all_classes - pos
                if config.weight_global != 0.0:
                    p = global_scores(f_text, constant(text_globals[int(idx)]), config.similarity_scale)
                    lg = ranking_loss(p, pos, neg, config.margin)
                    if lg is not None:
                        global_losses.append(lg)
                if config.weight_local != 0.0:
                    pl = local_scores(
                        l_feats, constant(text_seqs[int(idx)]),
                        config.similarity_scale, config.local_temperature,
                    )
                    ll = ranking_loss(pl, pos, neg, config.margin)
                    if ll is not None:
                        local_losses.append(ll)

            global_value = local_value = 0.0
            if global_losses:
                g_total = global_losses[0]
                for extra in global_losses[1:]:
                    g_total = g_total + extra
                g_total = g_total * (1.0 / len(global_losses))
                global_value = g_total.item()
                terms.append(g_total * config.weight_global)
            if local_losses:
                l_total = local_losses[0]
                for extra in local_losses[1:]:
                    l_total = l_total + extra
                l_total = l_total * (1.0 / len(local_losses))
                local_value = l_total.item()
                terms.append(l_total * config.weight_local)

            if not terms:
                continue
            total = terms[0]
            for extra in terms[1:]:
                total = total + extra
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}")
            total.backward()
            ctx_velocities = sgd_step(
                context_params, [p.grad for p in context_params], config.learning_rate,
                momentum=config.momentum, velocities=ctx_velocities,
            )
            if text_ad_params:
                ad_velocities = sgd_step(
                    text_ad_params, [p.grad for p in text_ad_params], adapter_lr,
                    momentum=config.momentum, velocities=ad_velocities,
                )
            if visual_ad_params:
                vis_velocities = sgd_step(
                    visual_ad_params, [p.grad for p in visual_ad_params], visual_lr,
                    momentum=config.momentum, velocities=vis_velocities,
                )
            for p in params:
                p.grad = None
            if any(not np.all(np.isfinite(p.data)) for p in params):
                raise TrainingDivergedError(
                    f"non-finite parameters after update at epoch {epoch} step {step}"
                )
            result.history.append((epoch, step, value, tpc_value, global_value, local_value))
            step += 1
    return result


def inference_embeddings(
    enc: FrozenDualEncoder,
    promptset: TextPromptSet,
    adapter: DualAdapter | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Class embedding matrices for inference, detached from the graph.

    The global rows pass through the text adapter branch (when one is
    supplied); the local rows are used raw.
    """
    detached = TextPromptSet(
        global_context=promptset.global_context.detach(),
        local_context=promptset.local_context.detach(),
        class_word_embeddings=promptset.class_word_embeddings,
        class_names=promptset.class_names,
        init_seed=promptset.init_seed,
    )
    g_feats, l_feats = class_embeddings(enc, detached)
    if adapter is not None:
        frozen = DualAdapter(*[p.detach() for p in adapter.parameters()])
        g_feats = apply_adapter(frozen, "text", g_feats)
    return g_feats.data.copy(), l_feats.data.copy()
