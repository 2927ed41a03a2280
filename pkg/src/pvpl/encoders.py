"""Deterministic frozen dual encoder with a shared latent space.

A desk-scale stand-in for a pretrained image/text encoder pair: both
encoders are pure functions of a seed, share one D-dimensional output
space, and are never trained. The shared space is made genuinely aligned
by construction:

* every class gets an anchor direction in the latent space, drawn from a
  seeded orthonormal basis and assigned by a hash of the class *name*
  (so the geometry is independent of class ordering);
* the token embeddings of class words are planted on a matching
  orthonormal basis of the embedding space and boosted, and the text
  projection is built to map each planted embedding exactly onto its
  anchor;
* each class also owns a pixel pattern (a smooth orthonormal direction
  in patch-pixel space), and the patch projection maps that pattern onto
  the class's *visual* direction: the text anchor plus an image-only
  offset direction that the text projection cannot express. Rendered
  images therefore land near the text features of sentences about the
  same classes, while also carrying class-specific visual structure that
  no text feature contains — the information that visual-prompt training
  can capture and contrastive transfer can hand to the text side.

Text pooling reads the <EOS> position of the once-attended sequence;
image pooling attends over patch embeddings with a mean query. Both
paths are differentiable with respect to their inputs, which is what
lets image-shaped prompt tensors be trained through the frozen image
encoder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DegenerateVectorError,
    ShapeError,
    Tensor,
    concat_rows,
    constant,
    extract_patches,
    gather,
    l2_normalize,
    matmul,
    softmax,
    tmean,
)
from .corpus import CategorySet, grammar_vocabulary, split_words

EOS_TOKEN = "<eos>"
OOV_TOKEN = "<oov>"
EOS_ID = 0
OOV_ID = 1

CLASS_EMBED_SCALE = 1.0   # boost of class-word token embeddings
WORD_EMBED_SCALE = 0.4    # ordinary-word embeddings stay below class words
EOS_EMBED_SCALE = 0.1     # keep the <EOS> embedding nearly silent
VALUE_MIX = 0.1           # off-identity scale of the attention value map
POS_EMBED_SCALE = 0.02    # per-patch positional offsets
IMAGE_OFFSET_SCALE = 0.7  # image-only share of each class's visual direction
GHOST_ALIGN = 0.5         # how strongly a ghost texture excites its class anchor


@dataclass(frozen=True)
class EncoderDims:
    """Dimension configuration; defaults keep training at seconds scale."""

    d_embed: int = 32
    d_latent: int = 64
    patch_size: int = 8
    image_size: int = 32
    max_seq: int = 32

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class EncoderOutput:
    """Global pooled feature (unit norm) plus per-token / per-patch rows."""

    global_feature: Tensor
    sequence_features: Tensor


@dataclass
class FrozenDualEncoder:
    """Immutable after construction; safe for concurrent read-only use."""

    dims: EncoderDims
    seed: int
    vocab: dict[str, int]
    class_names: tuple[str, ...]
    token_embedding: np.ndarray      # V × d_embed
    text_projection: np.ndarray      # d_embed × d_latent
    patch_projection: np.ndarray     # patch_pixels × d_latent
    attn_query: np.ndarray           # d_latent × d_latent
    attn_key: np.ndarray             # d_latent × d_latent
    attn_value: np.ndarray           # d_latent × d_latent
    patch_pos_embedding: np.ndarray  # num_patches × d_latent
    class_anchors: np.ndarray        # N × d_latent, text-side directions
    class_image_anchors: np.ndarray  # N × d_latent, anchors plus image-only offsets
    class_patterns: np.ndarray       # N × patch_pixels
    ghost_patterns: np.ndarray       # N × patch_pixels, look-alike textures

    PARAM_FIELDS = (
        "token_embedding",
        "text_projection",
        "patch_projection",
        "attn_query",
        "attn_key",
        "attn_value",
        "patch_pos_embedding",
        "class_anchors",
        "class_image_anchors",
        "class_patterns",
        "ghost_patterns",
    )

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_FIELDS}

    def class_anchor(self, class_index: int) -> np.ndarray:
        return self.class_anchors[class_index]

    def image_anchor(self, class_index: int) -> np.ndarray:
        return self.class_image_anchors[class_index]

    def class_word_embeddings(self) -> np.ndarray:
        """Token-table embedding of each class's primary name, N × d_embed."""
        rows = [self.token_embedding[self.vocab[split_words(n)[0]]] for n in self.class_names]
        return np.stack(rows).astype(np.float32)


def encoder_checksum(enc: FrozenDualEncoder) -> str:
    """SHA-256 over all serialized parameters, in fixed field order."""
    h = hashlib.sha256()
    for name, arr in enc.parameters().items():
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- seeded construction helpers -------------------------------------------


def _keyed_rng(seed: int, *key: str) -> np.random.Generator:
    h = hashlib.sha256(str(seed).encode())
    for part in key:
        h.update(b"\x00" + part.encode())
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _ortho_basis(seed: int, label: str, n: int) -> np.ndarray:
    """Rows form a deterministic random orthonormal basis of R^n."""
    m = _keyed_rng(seed, label).normal(size=(n, n))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    return q.T


def _dct_row(p: int, k: int) -> np.ndarray:
    """Orthonormal 1-D DCT-II basis vector k on p samples."""
    x = np.arange(p)
    v = np.cos(np.pi * k * (2 * x + 1) / (2 * p))
    return v * np.sqrt((1.0 if k == 0 else 2.0) / p)


def _smooth_pattern_bank(patch: int, channels: int = 3) -> np.ndarray:
    """Mutually orthonormal pixel patterns that are constant along x.

    Each pattern is a single vertical DCT profile on one channel
    (horizontal frequency zero). Such patterns are exactly invariant
    under horizontal flips and keep their phase under small horizontal
    pixel shifts, which is what makes test-time augmentation with
    flip/shift views behave. Rows are ordered low frequency first.
    """
    slots = []
    for ky in range(min(patch, 8)):
        for c in range(channels):
            slots.append((ky, c))
    rows = []
    for ky, c in slots:
        pat = np.zeros((patch, patch, channels))
        pat[:, :, c] = np.outer(_dct_row(patch, ky), _dct_row(patch, 0))
        rows.append(pat.reshape(-1))
    return np.stack(rows)


def _assign_slots(
    names: tuple[str, ...],
    dim: int,
    salt: str,
    taken: set[int] | None = None,
) -> dict[str, int]:
    """Hash each class name to a basis slot; linear probing on collision.

    Names are processed in sorted order so the assignment depends only on
    the *set* of names, never on their ordering. Passing a shared
    ``taken`` set keeps several slot families disjoint within one basis.
    """
    used = set() if taken is None else taken
    if len(names) + len(used) > dim:
        raise ValueError(f"{len(names)} classes exceed the {dim} available {salt} slots")
    slots: dict[str, int] = {}
    for name in sorted(names):
        digest = hashlib.sha256(f"{salt}:{name}".encode()).digest()
        s = int.from_bytes(digest[:8], "little") % dim
        while s in used:
            s = (s + 1) % dim
        slots[name] = s
        used.add(s)
    return slots


def build_encoder(seed: int, dims: EncoderDims, categories: CategorySet) -> FrozenDualEncoder:
    """Construct the frozen encoder pair for a class vocabulary.

    All parameters are derived from the seed; building twice with the
    same arguments yields bitwise-identical parameters. Construction
    arithmetic runs in float64 and is cast to float32 at the end, so the
    planted identities (class token -> anchor, class pattern -> anchor)
    hold to float32 resolution.
    """
    if min(dims.d_embed, dims.d_latent, dims.patch_size, dims.image_size, dims.max_seq) <= 0:
        raise ValueError(f"all dimensions must be positive: {dims}")
    if dims.image_size % dims.patch_size:
        raise ValueError(f"image size {dims.image_size} not divisible by patch {dims.patch_size}")
    names = categories.names
    n = len(names)
    limit = min(dims.d_embed, dims.d_latent // 3, len(_smooth_pattern_bank(dims.patch_size)) // 2)
    if n > limit:
        raise ValueError(f"{n} classes exceed the capacity {limit} of the configured dims")

    token_to_class: dict[str, int] = {}
    for i in range(n):
        for form in categories.surface_forms(i):
            for tok in split_words(form):
                if token_to_class.get(tok, i) != i:
                    raise ValueError(f"token '{tok}' appears in two different classes")
                token_to_class[tok] = i

    words = sorted(grammar_vocabulary() | categories.surface_tokens())
    vocab = {EOS_TOKEN: EOS_ID, OOV_TOKEN: OOV_ID}
    for w in words:
        vocab[w] = len(vocab)

    embed_basis = _ortho_basis(seed, "embed-basis", dims.d_embed)
    anchor_basis = _ortho_basis(seed, "anchor-basis", dims.d_latent)
    pattern_basis = _smooth_pattern_bank(dims.patch_size)
    embed_slots = _assign_slots(names, dims.d_embed, "embed")
    # three disjoint direction families per class in the latent space:
    # the text anchor, the image-only offset, and the ghost-texture residue
    latent_taken: set[int] = set()
    anchor_slots = _assign_slots(names, dims.d_latent, "anchor", latent_taken)
    offset_slots = _assign_slots(names, dims.d_latent, "offset", latent_taken)
    junk_slots = _assign_slots(names, dims.d_latent, "ghost-junk", latent_taken)
    # real and ghost pixel patterns come from one smooth orthonormal bank
    pattern_taken: set[int] = set()
    pattern_slots = _assign_slots(names, len(pattern_basis), "pattern", pattern_taken)
    ghost_slots = _assign_slots(names, len(pattern_basis), "ghost", pattern_taken)

    class_embeds = np.stack([embed_basis[embed_slots[nm]] for nm in names])      # N × D_e
    anchors = np.stack([anchor_basis[anchor_slots[nm]] for nm in names])         # N × D
    offsets = np.stack([anchor_basis[offset_slots[nm]] for nm in names])         # N × D
    junk = np.stack([anchor_basis[junk_slots[nm]] for nm in names])              # N × D
    image_anchors = (anchors + IMAGE_OFFSET_SCALE * offsets) / np.sqrt(
        1.0 + IMAGE_OFFSET_SCALE**2
    )
    ghost_anchors = GHOST_ALIGN * anchors + np.sqrt(1.0 - GHOST_ALIGN**2) * junk
    patterns = np.stack([pattern_basis[pattern_slots[nm]] for nm in names])      # N × pp
    ghosts = np.stack([pattern_basis[ghost_slots[nm]] for nm in names])          # N × pp

    token_embedding = np.zeros((len(vocab), dims.d_embed))
    for tok, tid in vocab.items():
        if tok == EOS_TOKEN:
            token_embedding[tid] = EOS_EMBED_SCALE * _unit(_keyed_rng(seed, "token", tok), dims.d_embed)
        elif tok in token_to_class:
            token_embedding[tid] = CLASS_EMBED_SCALE * class_embeds[token_to_class[tok]]
        else:
            token_embedding[tid] = WORD_EMBED_SCALE * _unit(_keyed_rng(seed, "token", tok), dims.d_embed)

    # the text side may express anchors but never the image-only offsets;
    # the image side emits anchor/offset energy only through the planted
    # patterns (real ones carry the full visual direction, ghosts a weak
    # anchor share), never through arbitrary pixel content
    offset_free = np.eye(dims.d_latent) - offsets.T @ offsets
    planted_free = offset_free - anchors.T @ anchors

    scale = 1.0 / np.sqrt(dims.d_latent)
    r_text = _keyed_rng(seed, "text-proj").normal(0.0, scale, size=(dims.d_embed, dims.d_latent))
    text_projection = class_embeds.T @ anchors + (
        np.eye(dims.d_embed) - class_embeds.T @ class_embeds
    ) @ r_text @ offset_free

    r_patch = _keyed_rng(seed, "patch-proj").normal(0.0, scale, size=(dims.patch_pixels, dims.d_latent))
    patch_projection = (
        patterns.T @ image_anchors
        + ghosts.T @ ghost_anchors
        + (np.eye(dims.patch_pixels) - patterns.T @ patterns - ghosts.T @ ghosts)
        @ r_patch @ planted_free
    )

    d = dims.d_latent
    attn_query = _keyed_rng(seed, "attn-q").normal(0.0, scale, size=(d, d))
    attn_key = _keyed_rng(seed, "attn-k").normal(0.0, scale, size=(d, d))
    attn_value = np.eye(d) + VALUE_MIX * _keyed_rng(seed, "attn-v").normal(0.0, scale, size=(d, d))
    patch_pos = _keyed_rng(seed, "patch-pos").normal(
        0.0, POS_EMBED_SCALE, size=(dims.num_patches, d)
    ) @ planted_free

    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return FrozenDualEncoder(
        dims=dims,
        seed=seed,
        vocab=vocab,
        class_names=names,
        token_embedding=f32(token_embedding),
        text_projection=f32(text_projection),
        patch_projection=f32(patch_projection),
        attn_query=f32(attn_query),
        attn_key=f32(attn_key),
        attn_value=f32(attn_value),
        patch_pos_embedding=f32(patch_pos),
        class_anchors=f32(anchors),
        class_image_anchors=f32(image_anchors),
        class_patterns=f32(patterns),
        ghost_patterns=f32(ghosts),
    )


# -- encoding ----------------------------------------------------------------


def tokenize(enc: FrozenDualEncoder, sentence: str) -> list[int]:
    """Lowercase, split on non-alphanumerics, map through the vocab with an
    out-of-vocabulary id, append <EOS>, truncate to the max length."""
    ids = [enc.vocab.get(w, OOV_ID) for w in split_words(sentence)]
    return ids[: enc.dims.max_seq - 1] + [EOS_ID]


def encode_embeddings(enc: FrozenDualEncoder, rows: Tensor, read_pos: int) -> EncoderOutput:
    """Shared text-side forward: project embedding rows into the latent
    space, mix once with self-attention, read the pooled feature at
    ``read_pos`` and L2-normalize it."""
    if rows.data.ndim != 2 or rows.data.shape[1] != enc.dims.d_embed:
        raise ShapeError(f"expected L×{enc.dims.d_embed} embedding rows, got {rows.shape}")
    x = matmul(rows, constant(enc.text_projection))
    q = matmul(x, constant(enc.attn_query))
    k = matmul(x, constant(enc.attn_key))
    v = matmul(x, constant(enc.attn_value))
    weights = softmax(matmul(q, k.T) * (1.0 / np.sqrt(enc.dims.d_latent)))
    mixed = x + matmul(weights, v)
    pooled = gather(mixed, [read_pos]).reshape((enc.dims.d_latent,))
    return EncoderOutput(
        global_feature=l2_normalize(pooled),
        sequence_features=mixed,
    )


def encode_text(enc: FrozenDualEncoder, tokens: list[int]) -> EncoderOutput:
    """Encode a token-id sequence; the pooled feature reads the <EOS> slot."""
    if not tokens or tokens[-1] != EOS_ID:
        raise ValueError("token sequence must end with the <EOS> id")
    if len(tokens) > enc.dims.max_seq:
        raise ValueError(f"sequence length {len(tokens)} exceeds max {enc.dims.max_seq}")
    if any(not 0 <= t < len(enc.vocab) for t in tokens):
        raise ValueError("token id out of vocabulary range")
    rows = constant(enc.token_embedding[np.asarray(tokens, dtype=np.intp)])
    return encode_embeddings(enc, rows, read_pos=len(tokens) - 1)


def encode_image(enc: FrozenDualEncoder, image: Tensor | np.ndarray) -> EncoderOutput:
    """Encode an H×W×3 image (H, W multiples of the patch size).

    Per-patch embeddings are the sequence features; the global feature is
    attention pooling over patches with a mean-of-patches query,
    L2-normalized. Differentiable end-to-end in the image, so trainable
    image-shaped prompts can be optimized through this path.
    """
    if not isinstance(image, Tensor):
        image = constant(np.asarray(image, dtype=np.float32))
    if image.data.ndim != 3 or image.data.shape[2] != 3:
        raise ShapeError(f"expected an H×W×3 image, got shape {image.shape}")
    patches = extract_patches(image, enc.dims.patch_size)
    p = matmul(patches, constant(enc.patch_projection)) + constant(enc.patch_pos_embedding)
    q = matmul(tmean(p, axis=0).reshape((1, enc.dims.d_latent)), constant(enc.attn_query))
    k = matmul(p, constant(enc.attn_key))
    v = matmul(p, constant(enc.attn_value))
    weights = softmax(matmul(q, k.T) * (1.0 / np.sqrt(enc.dims.d_latent)))
    pooled = matmul(weights, v).reshape((enc.dims.d_latent,))
    return EncoderOutput(
        global_feature=l2_normalize(pooled),
        sequence_features=p,
    )


# -- rendered image fixtures ---------------------------------------------------


def _stamp(img: np.ndarray, pattern: np.ndarray, flat: int, grid: int, patch: int) -> None:
    r, col = divmod(int(flat), grid)
    img[r * patch:(r + 1) * patch, col * patch:(col + 1) * patch] += pattern


def render_image(
    enc: FrozenDualEncoder,
    class_indices: tuple[int, ...],
    rng: np.random.Generator,
    pattern_gain: float = 2.0,
    noise_sigma: float = 0.25,
    ghost_rate: float = 0.5,
    ghost_gain: float = 2.0,
) -> np.ndarray:
    """A synthetic H×W×3 image containing the given classes.

    Patch positions are shuffled and split among the classes (one share
    stays background); each class share is stamped with that class's
    pixel pattern on top of Gaussian pixel noise. Background patches may
    receive ghost textures of absent classes: look-alikes that weakly
    excite a class's text-aligned direction without carrying its full
    visual structure. Scorers that only know the text side of a class
    are fooled by ghosts; scorers that know its visual direction are not.
    """
    dims = enc.dims
    size = dims.image_size
    img = rng.normal(0.0, noise_sigma, size=(size, size, 3))
    absent = [c for c in range(len(enc.class_names)) if c not in class_indices]
    ghost_classes = [
        int(c) for c in rng.permutation(absent)[:2] if rng.random() < ghost_rate
    ]
    order = rng.permutation(dims.num_patches)
    shares = np.array_split(order, len(class_indices) + len(ghost_classes) + 1)
    shape = (dims.patch_size, dims.patch_size, 3)
    for share, c in zip(shares, class_indices):
        pattern = pattern_gain * enc.class_patterns[c].reshape(shape)
        for flat in share:
            _stamp(img, pattern, flat, dims.grid, dims.patch_size)
    for share, c in zip(shares[len(class_indices):], ghost_classes):
        ghost = ghost_gain * enc.ghost_patterns[c].reshape(shape)
        for flat in share:
            _stamp(img, ghost, flat, dims.grid, dims.patch_size)
    return img.astype(np.float32)


def render_eval_set(
    enc: FrozenDualEncoder,
    count: int,
    seed: int,
    min_labels: int = 1,
    max_labels: int = 3,
    pattern_gain: float = 2.0,
    noise_sigma: float = 0.25,
    ghost_rate: float = 0.5,
    ghost_gain: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """A labeled multi-label image set: (count×H×W×3 images, count×N labels)."""
    n = len(enc.class_names)
    max_labels = min(max_labels, n)
    rng = np.random.default_rng(seed)
    size = enc.dims.image_size
    images = np.zeros((count, size, size, 3), dtype=np.float32)
    labels = np.zeros((count, n), dtype=np.float32)
    for i in range(count):
        k = int(rng.integers(min_labels, max_labels + 1))
        classes = tuple(int(c) for c in rng.choice(n, size=k, replace=False))
        images[i] = render_image(
            enc, classes, rng, pattern_gain, noise_sigma, ghost_rate, ghost_gain
        )
        labels[i, list(classes)] = 1.0
    return images, labels
