"""Toy image and text encoders sharing one embedding dimension.

The image encoder is a patch-embed + transformer stack whose last feature
map feeds an attention-pool layer; the pool's non-global outputs form the
language-compatible dense features. The text encoder embeds synthetic
class tokens (optionally behind learnable context rows), runs a small
transformer, and reads the final token out through a projection. Reading
the last position is our stand-in for an end-of-text readout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import Linear, MultiHeadAttention, TransformerBlock
from .tensor import ContractError, ShapeError, Tensor, concat, mean_rows, narrow, take

__all__ = [
    "FeatureMap",
    "PooledFeatures",
    "TextEmbeddings",
    "Vocabulary",
    "build_vocab",
    "ImageEncoderConfig",
    "TextEncoderConfig",
    "ToyImageEncoder",
    "ToyTextEncoder",
    "attention_pool",
    "encode_image",
    "encode_text",
    "freeze",
]


@dataclass
class FeatureMap:
    """Stage-4 visual features flattened row-major: row i is cell (i // w4, i % w4)."""

    h4: int
    w4: int
    c: int
    values: Tensor

    def __post_init__(self):
        if self.h4 * self.w4 < 1:
            raise ShapeError("feature map needs at least one cell")
        if self.values.shape != (self.h4 * self.w4, self.c):
            raise ShapeError(
                f"feature map values {self.values.shape} != ({self.h4 * self.w4}, {self.c})"
            )


@dataclass
class PooledFeatures:
    """Attention-pool outputs: the global row and the dense rows."""

    global_feat: Tensor  # (1, c)
    dense: Tensor  # (h4*w4, c)

    def memory(self) -> Tensor:
        """Concatenated [global, dense] sequence used as decoder memory."""
        return concat([self.global_feat, self.dense], axis=0)


@dataclass
class TextEmbeddings:
    t: Tensor  # (K, d)
    class_count: int

    def __post_init__(self):
        if self.t.shape[0] != self.class_count:
            raise ShapeError("text embedding row count != class count")


# ---------------------------------------------------------------------------
# Vocabulary: synthetic token ids; template tokens live at the front.


@dataclass
class Vocabulary:
    template_ids: list[int]
    class_tokens: dict[str, list[int]]
    size: int

    def tokens_for(self, names) -> list[list[int]]:
        out = []
        for name in names:
            if name not in self.class_tokens:
                raise KeyError(f"unknown class name {name!r}")
            out.append(self.class_tokens[name])
        return out

    def save(self, path):
        payload = {
            "template": self.template_ids,
            "classes": self.class_tokens,
            "size": self.size,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as fh:
            payload = json.load(fh)
        return Vocabulary(
            template_ids=list(payload["template"]),
            class_tokens={k: list(v) for k, v in payload["classes"].items()},
            size=int(payload["size"]),
        )


def build_vocab(class_names, template_len: int = 8) -> Vocabulary:
    """Deterministic table: template ids first, then 1-3 token ids per class."""
    template_ids = list(range(template_len))
    next_id = template_len
    class_tokens = {}
    for i, name in enumerate(class_names):
        width = 1 + (i % 3)
        class_tokens[str(name)] = list(range(next_id, next_id + width))
        next_id += width
    return Vocabulary(template_ids=template_ids, class_tokens=class_tokens, size=next_id)


# ---------------------------------------------------------------------------
# Image encoder


@dataclass
class ImageEncoderConfig:
    patch: int = 4
    width: int = 32
    blocks: int = 2
    heads: int = 4
    out_dim: int = 32
    ffn_mult: int = 2


def attention_pool(pool: MultiHeadAttention, x4: FeatureMap) -> PooledFeatures:
    """Mean-pool x4, prepend, self-attend, split back into (global, dense)."""
    bar = mean_rows(x4.values)
    seq = concat([bar, x4.values], axis=0)
    out = pool(seq)
    n = x4.h4 * x4.w4
    return PooledFeatures(
        global_feat=narrow(out, 0, 0, 1),
        dense=narrow(out, 0, 1, n + 1),
    )


class ToyImageEncoder:
    """Patch embedding, B transformer blocks, attention pool, projection to d."""

    def __init__(self, cfg: ImageEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        f = cfg.patch
        self.patch_embed = Linear(f * f * 3, cfg.width, rng)
        hidden = cfg.width * cfg.ffn_mult
        self.blocks = [
            TransformerBlock(cfg.width, cfg.heads, hidden, rng) for _ in range(cfg.blocks)
        ]
        self.pool = MultiHeadAttention(cfg.width, cfg.heads, rng)
        self.proj = Linear(cfg.width, cfg.out_dim, rng)
        self._patch_index_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def _patch_indices(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        cached = self._patch_index_cache.get(key)
        if cached is not None:
            return cached
        f = self.cfg.patch
        flat = np.arange(h * w * 3).reshape(h, w, 3)
        rows = []
        for pr in range(h // f):
            for pc in range(w // f):
                block = flat[pr * f : (pr + 1) * f, pc * f : (pc + 1) * f, :]
                rows.append(block.reshape(-1))
        idx = np.stack(rows)
        self._patch_index_cache[key] = idx
        return idx

    def encode(self, image: Tensor) -> tuple[FeatureMap, PooledFeatures]:
        h, w, ch = image.shape
        f = self.cfg.patch
        if ch != 3:
            raise ShapeError(f"expected H x W x 3 image, got {image.shape}")
        if h % f or w % f:
            raise ShapeError(f"image {h}x{w} not divisible by patch {f}")
        from .tensor import gather_flat

        patches = gather_flat(image, self._patch_indices(h, w))
        x = self.patch_embed(patches)
        for block in self.blocks:
            x = block(x)
        h4, w4 = h // f, w // f
        raw = FeatureMap(h4=h4, w4=w4, c=self.cfg.width, values=x)
        pooled_raw = attention_pool(self.pool, raw)
        fm = FeatureMap(h4=h4, w4=w4, c=self.cfg.out_dim, values=self.proj(x))
        pooled = PooledFeatures(
            global_feat=self.proj(pooled_raw.global_feat),
            dense=self.proj(pooled_raw.dense),
        )
        return fm, pooled

    def parameters(self):
        for name, p in self.patch_embed.parameters():
            yield f"patch_embed.{name}", p
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters():
                yield f"blocks.{i}.{name}", p
        for name, p in self.pool.parameters():
            yield f"pool.{name}", p
        for name, p in self.proj.parameters():
            yield f"proj.{name}", p


def encode_image(enc: ToyImageEncoder, image: Tensor):
    return enc.encode(image)


# ---------------------------------------------------------------------------
# Text encoder


@dataclass
class TextEncoderConfig:
    width: int = 48
    blocks: int = 2
    heads: int = 4
    out_dim: int = 32
    ffn_mult: int = 2
    vocab_size: int = 0  # filled in when the vocabulary is known


class ToyTextEncoder:
    """Per-class transformer over [contexts; class token embeddings].

    Row k of the output is the projected final-token state of class k's
    sequence; classes never attend to each other, so batched encoding
    equals per-class encoding exactly. `sequences_encoded` counts every
    class sequence pushed through, which is the cost unit for the
    pre/post prompting comparison.
    """

    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator, frozen: bool = True):
        if cfg.vocab_size < 1:
            raise ShapeError("text encoder needs a positive vocab size")
        self.cfg = cfg
        from .nn import init_uniform

        self.table = Tensor(
            init_uniform(rng, (cfg.vocab_size, cfg.width), cfg.width), requires_grad=True
        )
        hidden = cfg.width * cfg.ffn_mult
        self.blocks = [
            TransformerBlock(cfg.width, cfg.heads, hidden, rng) for _ in range(cfg.blocks)
        ]
        self.proj = Linear(cfg.width, cfg.out_dim, rng)
        self.frozen = False
        self.sequences_encoded = 0
        if frozen:
            freeze(self)

    @property
    def width(self) -> int:
        return self.cfg.width

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def embed_tokens(self, ids) -> Tensor:
        ids = list(ids)
        for tid in ids:
            if not (0 <= tid < self.cfg.vocab_size):
                raise ContractError(f"token id {tid} outside vocabulary")
        return take(self.table, np.asarray(ids, dtype=np.intp))

    def encode(self, contexts: Tensor | None, class_token_lists) -> TextEmbeddings:
        if contexts is not None and contexts.shape[0] > 0 and contexts.shape[1] != self.cfg.width:
            raise ShapeError(
                f"contexts width {contexts.shape[1]} != encoder width {self.cfg.width}"
            )
        rows = []
        for ids in class_token_lists:
            if len(ids) == 0:
                raise ContractError("every class needs at least one token")
            tok = self.embed_tokens(ids)
            if contexts is not None and contexts.shape[0] > 0:
                seq = concat([contexts, tok], axis=0)
            else:
                seq = tok
            for block in self.blocks:
                seq = block(seq)
            last = narrow(seq, 0, seq.shape[0] - 1, seq.shape[0])
            rows.append(self.proj(last))
            self.sequences_encoded += 1
        t = rows[0] if len(rows) == 1 else concat(rows, axis=0)
        return TextEmbeddings(t=t, class_count=len(rows))

    def parameters(self):
        yield "table", self.table
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters():
                yield f"blocks.{i}.{name}", p
        for name, p in self.proj.parameters():
            yield f"proj.{name}", p


def encode_text(enc: ToyTextEncoder, contexts: Tensor | None, class_token_lists) -> TextEmbeddings:
    return enc.encode(contexts, class_token_lists)


def freeze(enc: ToyTextEncoder):
    """Exclude all encoder weights from optimization; context rows passed
    into `encode` are inputs, not encoder weights, and stay trainable."""
    for _, p in enc.parameters():
        p.requires_grad = False
    enc.frozen = True
