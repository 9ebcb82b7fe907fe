"""End-to-end dense prediction pipeline.

image -> feature map + pooled features -> class embeddings (per prompt
mode) -> cosine score map -> [features, scores] fusion -> per-cell decode
head -> nearest-upsampled per-pixel logits. Total loss is the main
cross-entropy plus `aux_weight` times the auxiliary score-map loss; the
detection variant trains on the auxiliary objective alone and never runs
the decode head.
"""

from __future__ import annotations

import enum
import json
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoders import (
    FeatureMap,
    ImageEncoderConfig,
    PooledFeatures,
    TextEncoderConfig,
    TextEmbeddings,
    ToyImageEncoder,
    ToyTextEncoder,
    Vocabulary,
    build_vocab,
)
from .matching import (
    LossConfig,
    ScoreMap,
    SegTarget,
    compute_score_map,
    det_aux_loss,
    fuse_features,
    rasterize_boxes,
    seg_aux_loss,
)
from .nn import Linear, TransformerDecoderLayer
from .prompting import (
    GATE_PRESETS,
    LearnableQueries,
    PromptContexts,
    PromptMode,
    ResidualGate,
    TextPath,
)
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    gelu,
    mul,
    no_grad,
    read_dct1,
    take,
    write_dct1,
)

__all__ = [
    "TaskMode",
    "PipelineConfig",
    "DecodeHead",
    "DensePredPipeline",
    "PipelineOutput",
    "build_pipeline",
    "swap_backbone",
    "predict_segmentation",
    "rng_for",
    "save_checkpoint",
    "load_checkpoint",
    "export_prediction",
    "toy_config",
    "micro_config",
]


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent, order-free stream per component: adding or removing a
    component never shifts the initialization of the others."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    )


class TaskMode(enum.Enum):
    SEGMENTATION = "segmentation"
    DETECTION_AUX = "detection"


@dataclass
class PipelineConfig:
    """Bare defaults follow the full-scale recipe (context length 8,
    6-layer/4-head prompting decoder); the toy/micro presets shrink the
    decoder so the test suite runs in seconds."""

    shared_dim: int = 32
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    prompt_mode: str | None = "coop"  # template|coop|pre|post, or None for no language path
    context_len: int = 8
    template_len: int = 8
    context_init: str = "template"  # template|random
    prompt_decoder_depth: int = 6
    prompt_decoder_heads: int = 4
    prompt_ffn_mult: int = 2
    gate_preset: str = "learnable_small"
    head_hidden: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    task_mode: str = "segmentation"
    freeze_text: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        d = dict(d)
        if "image" in d:
            d["image"] = ImageEncoderConfig(**d["image"])
        if "text" in d:
            d["text"] = TextEncoderConfig(**d["text"])
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return PipelineConfig(**d)


def toy_config(prompt_mode: str | None = "coop") -> PipelineConfig:
    """Default desk-scale configuration for the bundled synthetic task."""
    return PipelineConfig(
        shared_dim=32,
        image=ImageEncoderConfig(patch=4, width=32, blocks=2, heads=4, out_dim=32, ffn_mult=2),
        text=TextEncoderConfig(width=48, blocks=2, heads=4, out_dim=32, ffn_mult=2),
        prompt_mode=prompt_mode,
        context_len=8,
        prompt_decoder_depth=2,
        prompt_decoder_heads=4,
        head_hidden=64,
    )


def micro_config(prompt_mode: str | None = "coop") -> PipelineConfig:
    """Minimal configuration used by gradient checks; runs in milliseconds."""
    return PipelineConfig(
        shared_dim=8,
        image=ImageEncoderConfig(patch=4, width=8, blocks=1, heads=2, out_dim=8, ffn_mult=2),
        text=TextEncoderConfig(width=8, blocks=1, heads=2, out_dim=8, ffn_mult=2),
        prompt_mode=prompt_mode,
        context_len=2,
        template_len=2,
        prompt_decoder_depth=1,
        prompt_decoder_heads=2,
        head_hidden=8,
    )


class DecodeHead:
    """Two-stage per-cell channel mixer plus nearest-neighbor upsampling."""

    def __init__(self, in_dim: int, hidden: int, k: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.k = k
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, k, rng)
        self.forward_count = 0

    def __call__(self, fused: Tensor, fine_to_coarse: np.ndarray) -> Tensor:
        self.forward_count += 1
        coarse = self.fc2(gelu(self.fc1(fused)))
        return take(coarse, fine_to_coarse)

    def parameters(self):
        for name, p in self.fc1.parameters():
            yield f"fc1.{name}", p
        for name, p in self.fc2.parameters():
            yield f"fc2.{name}", p


@dataclass
class PipelineOutput:
    main_logits: Tensor | None
    score: ScoreMap | None
    loss: Tensor
    breakdown: dict


class DensePredPipeline:
    def __init__(
        self,
        cfg: PipelineConfig,
        class_names,
        image_encoder: ToyImageEncoder,
        text_path: TextPath | None,
        head: DecodeHead | None,
        seed: int,
        backbone_adapter: Linear | None = None,
    ):
        self.cfg = cfg
        self.class_names = list(class_names)
        self.k = len(self.class_names)
        self.image_encoder = image_encoder
        self.text_path = text_path
        self.head = head
        self.seed = seed
        self.backbone_adapter = backbone_adapter
        self.task_mode = TaskMode(cfg.task_mode)
        self.loss_cfg = cfg.loss
        self._index_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        if self.task_mode == TaskMode.DETECTION_AUX and text_path is None:
            raise ContractError("detection-aux mode needs the language path")

    # -- geometry helpers ---------------------------------------------------

    def _maps_for(self, h: int, w: int):
        key = (h, w)
        if key in self._index_cache:
            return self._index_cache[key]
        f = self.image_encoder.cfg.patch
        h4, w4 = h // f, w // f
        rows = np.arange(h) // f
        cols = np.arange(w) // f
        fine_to_coarse = (rows[:, None] * w4 + cols[None, :]).reshape(-1)
        centers_r = np.arange(h4) * f + f // 2
        centers_c = np.arange(w4) * f + f // 2
        coarse_centers = (centers_r[:, None] * w + centers_c[None, :]).reshape(-1)
        self._index_cache[key] = (fine_to_coarse, coarse_centers)
        return self._index_cache[key]

    # -- encoding -----------------------------------------------------------

    def encode_image(self, image: Tensor) -> tuple[FeatureMap, PooledFeatures]:
        fm, pooled = self.image_encoder.encode(image)
        if self.backbone_adapter is not None:
            fm = FeatureMap(
                h4=fm.h4, w4=fm.w4, c=self.cfg.shared_dim,
                values=self.backbone_adapter(fm.values),
            )
            pooled = PooledFeatures(
                global_feat=self.backbone_adapter(pooled.global_feat),
                dense=self.backbone_adapter(pooled.dense),
            )
        return fm, pooled

    def base_text_embeddings(self) -> TextEmbeddings | None:
        if self.text_path is None or self.text_path.mode == PromptMode.PRE_MODEL:
            return None
        return self.text_path.base_embeddings()

    # -- forward ------------------------------------------------------------

    def forward(self, image: Tensor, target, base_text: TextEmbeddings | None = None) -> PipelineOutput:
        fm, pooled = self.encode_image(image)
        score = None
        aux = None
        if self.text_path is not None:
            t = self.text_path.embeddings_for_image(pooled, base=base_text)
            score = compute_score_map(pooled.dense, t, fm.h4, fm.w4)

        if self.task_mode == TaskMode.DETECTION_AUX:
            det_target = rasterize_boxes(target, fm.h4, fm.w4, self.k)
            aux = det_aux_loss(score, det_target, self.loss_cfg)
            return PipelineOutput(
                main_logits=None,
                score=score,
                loss=aux,
                breakdown={"main": 0.0, "aux": aux.item(), "total": aux.item()},
            )

        h, w, _ = image.shape
        fine_to_coarse, coarse_centers = self._maps_for(h, w)
        mask = np.asarray(target, dtype=np.intp)
        if mask.shape != (h * w,):
            raise ContractError(f"mask shape {mask.shape} != ({h * w},)")

        if score is not None:
            fused = fuse_features(fm, score)
            coarse_y = SegTarget(y=mask[coarse_centers])
            aux = seg_aux_loss(score, coarse_y, self.loss_cfg)
        else:
            zeros = Tensor(np.zeros((fm.h4 * fm.w4, self.k)))
            from .tensor import concat

            fused = FeatureMap(
                h4=fm.h4, w4=fm.w4, c=fm.c + self.k,
                values=concat([fm.values, zeros], axis=1),
            )

        logits = self.head(fused.values, fine_to_coarse)
        main = cross_entropy(logits, mask)
        if aux is not None:
            total = add(main, mul(aux, self.loss_cfg.aux_weight))
        else:
            total = main
        return PipelineOutput(
            main_logits=logits,
            score=score,
            loss=total,
            breakdown={
                "main": main.item(),
                "aux": aux.item() if aux is not None else 0.0,
                "total": total.item(),
            },
        )

    def predict(self, image: Tensor) -> np.ndarray:
        """Per-pixel argmax; ties resolve to the lowest class id."""
        if self.task_mode != TaskMode.SEGMENTATION:
            raise ContractError("prediction requires segmentation mode")
        with no_grad():
            fm, pooled = self.encode_image(image)
            if self.text_path is not None:
                t = self.text_path.embeddings_for_image(pooled)
                score = compute_score_map(pooled.dense, t, fm.h4, fm.w4)
                fused = fuse_features(fm, score)
            else:
                from .tensor import concat

                zeros = Tensor(np.zeros((fm.h4 * fm.w4, self.k)))
                fused = FeatureMap(
                    h4=fm.h4, w4=fm.w4, c=fm.c + self.k,
                    values=concat([fm.values, zeros], axis=1),
                )
            h, w, _ = image.shape
            fine_to_coarse, _ = self._maps_for(h, w)
            logits = self.head(fused.values, fine_to_coarse)
        return np.argmax(logits.data, axis=1)

    # -- bookkeeping ----------------------------------------------------------

    def parameters(self):
        """Yield (name, tensor, group) across the whole pipeline.

        Without a language path the attention pool sits outside the loss
        (its outputs only ever feed the score map), so its parameters are
        not part of the trained model.
        """
        for name, p in self.image_encoder.parameters():
            if self.text_path is None and name.startswith("pool."):
                continue
            yield f"image_encoder.{name}", p, "image_encoder"
        if self.backbone_adapter is not None:
            for name, p in self.backbone_adapter.parameters():
                yield f"backbone_adapter.{name}", p, "other"
        if self.text_path is not None:
            for name, p in self.text_path.parameters():
                group = "text_encoder" if name.startswith("encoder.") else "other"
                yield f"text.{name}", p, group
        if self.head is not None:
            for name, p in self.head.parameters():
                yield f"head.{name}", p, "other"

    def trainable_param_count(self) -> int:
        return sum(p.size for _, p, _ in self.parameters() if p.requires_grad)

    def text_sequence_count(self) -> int:
        if self.text_path is None:
            return 0
        return self.text_path.encoder.sequences_encoded

    def cache_text(self):
        if self.text_path is not None and self.text_path.mode != PromptMode.PRE_MODEL:
            self.text_path.cache()


def _build_text_path(cfg: PipelineConfig, class_names, vocab: Vocabulary, seed: int) -> TextPath | None:
    if cfg.prompt_mode is None or cfg.prompt_mode == "none":
        return None
    mode = PromptMode.parse(cfg.prompt_mode)
    text_cfg = TextEncoderConfig(**{**asdict(cfg.text), "vocab_size": vocab.size,
                                    "out_dim": cfg.shared_dim})
    encoder = ToyTextEncoder(text_cfg, rng_for(seed, "text_encoder"), frozen=cfg.freeze_text)

    contexts = queries = adapter = gate = None
    decoder_layers = []
    if mode in (PromptMode.LANGUAGE_ONLY, PromptMode.POST_MODEL):
        if cfg.context_init == "template":
            ids = (vocab.template_ids * ((cfg.context_len // max(len(vocab.template_ids), 1)) + 1))[
                : cfg.context_len
            ]
            contexts = PromptContexts.from_template(encoder, ids)
        else:
            contexts = PromptContexts.random(
                rng_for(seed, "contexts"), cfg.context_len, text_cfg.width
            )
    if mode in (PromptMode.PRE_MODEL, PromptMode.POST_MODEL):
        rng_dec = rng_for(seed, "prompt_decoder")
        decoder_layers = [
            TransformerDecoderLayer(
                cfg.shared_dim, cfg.prompt_decoder_heads,
                cfg.shared_dim * cfg.prompt_ffn_mult, rng_dec,
            )
            for _ in range(cfg.prompt_decoder_depth)
        ]
    if mode == PromptMode.PRE_MODEL:
        queries = LearnableQueries.random(rng_for(seed, "queries"), cfg.context_len, cfg.shared_dim)
        adapter = Linear(cfg.shared_dim, text_cfg.width, rng_for(seed, "pre_adapter"))
    if mode == PromptMode.POST_MODEL:
        init_value, learnable = GATE_PRESETS[cfg.gate_preset]
        gate = ResidualGate.create(cfg.shared_dim, init_value, learnable)

    return TextPath(
        mode=mode,
        encoder=encoder,
        vocab=vocab,
        class_names=class_names,
        contexts=contexts,
        queries=queries,
        adapter=adapter,
        decoder_layers=decoder_layers,
        gate=gate,
    )


def build_pipeline(cfg: PipelineConfig, class_names, seed: int) -> DensePredPipeline:
    if cfg.image.out_dim != cfg.shared_dim:
        raise ShapeError("image encoder out_dim must equal the shared dim")
    class_names = [str(n) for n in class_names]
    vocab = build_vocab(class_names, template_len=cfg.template_len)
    image_encoder = ToyImageEncoder(cfg.image, rng_for(seed, "image_encoder"))
    text_path = _build_text_path(cfg, class_names, vocab, seed)
    k = len(class_names)
    head = None
    if TaskMode(cfg.task_mode) == TaskMode.SEGMENTATION:
        head = DecodeHead(cfg.shared_dim + k, cfg.head_hidden, k, rng_for(seed, "head"))
    return DensePredPipeline(
        cfg=cfg,
        class_names=class_names,
        image_encoder=image_encoder,
        text_path=text_path,
        head=head,
        seed=seed,
    )


def swap_backbone(pipe: DensePredPipeline, new_encoder: ToyImageEncoder) -> DensePredPipeline:
    """Same text path, head and losses on top of a different visual backbone.

    If the new backbone emits a different feature dim, a linear adapter is
    inserted so the matching and fusion contracts still hold.
    """
    adapter = None
    if new_encoder.out_dim != pipe.cfg.shared_dim:
        adapter = Linear(new_encoder.out_dim, pipe.cfg.shared_dim, rng_for(pipe.seed, "backbone_adapter"))
    swapped = DensePredPipeline(
        cfg=pipe.cfg,
        class_names=pipe.class_names,
        image_encoder=new_encoder,
        text_path=pipe.text_path,
        head=pipe.head,
        seed=pipe.seed,
        backbone_adapter=adapter,
    )
    return swapped


def predict_segmentation(pipe: DensePredPipeline, image: Tensor) -> np.ndarray:
    return pipe.predict(image)


# ---------------------------------------------------------------------------
# Checkpointing: JSON manifest + one DCT1 dump per parameter.


def save_checkpoint(pipe: DensePredPipeline, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    for name, p, group in pipe.parameters():
        fname = name.replace("/", "_") + ".dct1"
        write_dct1(os.path.join(out_dir, fname), p)
        entries[name] = {"file": fname, "group": group, "trainable": p.requires_grad}
    manifest = {
        "config": pipe.cfg.to_dict(),
        "class_names": pipe.class_names,
        "seed": pipe.seed,
        "has_backbone_adapter": pipe.backbone_adapter is not None,
        "params": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(ckpt_dir) -> DensePredPipeline:
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = PipelineConfig.from_dict(manifest["config"])
    pipe = build_pipeline(cfg, manifest["class_names"], manifest["seed"])
    if manifest.get("has_backbone_adapter"):
        raise ContractError("checkpoints of adapter-swapped pipelines are not restorable")
    params = {name: p for name, p, _ in pipe.parameters()}
    for name, entry in manifest["params"].items():
        if name not in params:
            raise KeyError(f"checkpoint parameter {name} not in rebuilt pipeline")
        arr = read_dct1(os.path.join(ckpt_dir, entry["file"]))
        if arr.shape != params[name].shape:
            raise ShapeError(f"checkpoint shape mismatch on {name}")
        params[name].data = arr
    return pipe


# ---------------------------------------------------------------------------
# Prediction export: flat class-id grid as JSON or portable graymap (P2).


def export_prediction(pred: np.ndarray, h: int, w: int, path, fmt: str = "json"):
    pred = np.asarray(pred, dtype=int).reshape(h * w)
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump({"height": h, "width": w, "classes": pred.tolist()}, fh)
    elif fmt == "pgm":
        maxval = max(int(pred.max()), 1)
        lines = [f"P2", f"{w} {h}", f"{maxval}"]
        grid = pred.reshape(h, w)
        for r in range(h):
            lines.append(" ".join(str(int(v)) for v in grid[r]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}")
