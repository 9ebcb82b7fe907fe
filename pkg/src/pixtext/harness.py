"""Training harness: AdamW with per-group learning-rate multipliers,
gradient clipping, the train loop, mIoU evaluation and the ablation runner.

The fine-tuning recipe is baked into the defaults: decoupled weight decay,
the image encoder at a tenth of the base learning rate, and the text
encoder held at zero so the language priors survive training untouched.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import SyntheticSample
from .pipeline import DensePredPipeline, PipelineConfig, TaskMode, build_pipeline, toy_config
from .tensor import ContractError, Tensor, add, backward, mul, reset_tape

__all__ = [
    "OptimConfig",
    "AdamW",
    "clip_gradients",
    "TrainingDiverged",
    "RunReport",
    "train",
    "evaluate_miou",
    "miou_from_pairs",
    "run_ablation",
    "write_ablation_csv",
    "ABLATION_ROWS",
]


def _default_multipliers() -> dict:
    return {"image_encoder": 0.1, "text_encoder": 0.0, "other": 1.0}


@dataclass
class OptimConfig:
    lr: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    multipliers: dict = field(default_factory=_default_multipliers)
    clip_norm: float | None = None
    steps: int = 120
    batch_size: int = 32  # used only when the dataset exceeds 64 samples
    seed: int = 0

    def __post_init__(self):
        if any(m < 0 for m in self.multipliers.values()):
            raise ValueError("lr multipliers must be non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip norm must be positive when set")

    @staticmethod
    def from_dict(d: dict) -> "OptimConfig":
        return OptimConfig(**d)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Parameters in a zero-multiplier group are never read or written; a
    trainable parameter arriving at `step` without a gradient is a
    contract violation, not a silent skip.
    """

    def __init__(self, params, cfg: OptimConfig):
        # params: iterable of (name, Tensor, group)
        self.params = [(n, p, g) for n, p, g in params]
        self.cfg = cfg
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _multiplier(self, group: str) -> float:
        return self.cfg.multipliers.get(group, 1.0)

    def zero_grad(self):
        for _, p, group in self.params:
            if p.requires_grad and self._multiplier(group) > 0.0:
                p.grad = None

    def step(self):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p, group in self.params:
            mult = self._multiplier(group)
            if mult == 0.0 or not p.requires_grad:
                continue
            if p.grad is None:
                raise ContractError(f"parameter {name} is trainable but has no gradient")
            g = p.grad
            lr_eff = c.lr * mult
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            with np.errstate(over="ignore", invalid="ignore"):
                m = c.beta1 * m + (1.0 - c.beta1) * g
                v = c.beta2 * v + (1.0 - c.beta2) * g * g
                self._m[name] = m
                self._v[name] = v
                update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
                p.data = p.data - lr_eff * update - lr_eff * c.weight_decay * p.data


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the scale applied (1.0 when already within bounds).
    """
    tensors = [p for p in params if isinstance(p, Tensor) and p.grad is not None]
    total = 0.0
    for p in tensors:
        total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in tensors:
        p.grad *= scale
    return scale


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, report: dict):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.report = report


@dataclass
class RunReport:
    config: dict
    seed: int
    loss_series: list
    main_series: list
    aux_series: list
    final_train_miou: float
    final_eval_miou: float
    per_class_iou: list
    text_fwd_train: int
    text_fwd_infer: int
    trainable_params: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_dict(self) -> dict:
        """Everything except wall time, which is the one non-reproducible field."""
        d = self.to_dict()
        d.pop("wall_time_s")
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True)


def miou_from_pairs(pairs, k: int) -> tuple[list, float]:
    """IoU per class from (target, prediction) flat index pairs.

    Classes absent from both prediction and target are excluded from the
    mean (their IoU reports as None).
    """
    conf = np.zeros((k, k), dtype=np.int64)
    for target, pred in pairs:
        np.add.at(conf, (np.asarray(target), np.asarray(pred)), 1)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    ious: list = []
    valid = []
    for c in range(k):
        if union[c] > 0:
            iou = float(inter[c] / union[c])
            ious.append(iou)
            valid.append(iou)
        else:
            ious.append(None)
    mean = float(np.mean(valid)) if valid else 0.0
    return ious, mean


def evaluate_miou(pipe: DensePredPipeline, samples) -> tuple[list, float]:
    """Per-class IoU over the pooled pixels of all samples."""
    pairs = [(s.mask, pipe.predict(s.image)) for s in samples]
    return miou_from_pairs(pairs, pipe.k)


def _target_for(pipe: DensePredPipeline, sample: SyntheticSample):
    if pipe.task_mode == TaskMode.DETECTION_AUX:
        return sample.boxes
    return sample.mask


def train(pipe: DensePredPipeline, dataset, cfg: OptimConfig) -> RunReport:
    """Run the step budget on (train, eval) samples and report.

    Batching is full-dataset up to 64 samples, seeded minibatches above.
    Aborts with TrainingDiverged the moment the loss stops being finite.
    """
    train_samples, eval_samples = dataset
    start = time.perf_counter()
    opt = AdamW(list(pipe.parameters()), cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0xB47C]))
    n = len(train_samples)
    full_batch = n <= 64

    text_before = pipe.text_sequence_count()
    loss_series: list[float] = []
    main_series: list[float] = []
    aux_series: list[float] = []

    for step in range(cfg.steps):
        reset_tape()
        opt.zero_grad()
        if full_batch:
            order = np.arange(n)
        else:
            order = rng.permutation(n)[: cfg.batch_size]
        base_t = pipe.base_text_embeddings()
        total = None
        main_sum = 0.0
        aux_sum = 0.0
        for idx in order:
            s = train_samples[idx]
            out = pipe.forward(s.image, _target_for(pipe, s), base_text=base_t)
            total = out.loss if total is None else add(total, out.loss)
            main_sum += out.breakdown["main"]
            aux_sum += out.breakdown["aux"]
        batch_loss = mul(total, 1.0 / len(order))
        value = batch_loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value, {
                "loss_series": loss_series, "config": cfg.__dict__.copy(),
            })
        backward(batch_loss)
        if cfg.clip_norm is not None:
            clip_gradients([p for _, p, _ in opt.params], cfg.clip_norm)
        opt.step()
        for name, p, _ in opt.params:
            if p.requires_grad and not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(step, float("nan"), {
                    "parameter": name, "loss_series": loss_series,
                    "config": cfg.__dict__.copy(),
                })
        loss_series.append(value)
        main_series.append(main_sum / len(order))
        aux_series.append(aux_sum / len(order))
    reset_tape()

    text_fwd_train = pipe.text_sequence_count() - text_before
    pipe.cache_text()

    if pipe.task_mode == TaskMode.SEGMENTATION:
        _, train_miou = evaluate_miou(pipe, train_samples)
        infer_before = pipe.text_sequence_count()
        per_class, eval_miou = evaluate_miou(pipe, eval_samples)
        text_fwd_infer = pipe.text_sequence_count() - infer_before
    else:
        train_miou = eval_miou = 0.0
        per_class = []
        text_fwd_infer = 0

    return RunReport(
        config={
            "pipeline": pipe.cfg.to_dict(),
            "optim": asdict(cfg),
            "class_names": pipe.class_names,
        },
        seed=cfg.seed,
        loss_series=loss_series,
        main_series=main_series,
        aux_series=aux_series,
        final_train_miou=train_miou,
        final_eval_miou=eval_miou,
        per_class_iou=per_class,
        text_fwd_train=text_fwd_train,
        text_fwd_infer=text_fwd_infer,
        trainable_params=pipe.trainable_param_count(),
        wall_time_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Ablation runner


ABLATION_ROWS = [
    {"name": "baseline", "mode": None},
    {"name": "template", "mode": "template"},
    {"name": "coop", "mode": "coop"},
    {"name": "pre", "mode": "pre"},
    {"name": "post", "mode": "post"},
]


def run_ablation(dataset, class_names, suite: dict) -> list[dict]:
    """Train every configuration in the suite on the shared dataset + seed.

    Returns CSV-ready rows; a failed run keeps its row with blank metrics
    and the suite continues.
    """
    seed = int(suite.get("seed", 0))
    optim_overrides = dict(suite.get("optim", {}))
    rows_cfg = suite.get("rows", ABLATION_ROWS)
    out_rows = []
    for row in rows_cfg:
        name = row["name"]
        mode = row.get("mode")
        if mode in ("none", ""):
            mode = None
        pipe_cfg_dict = row.get("pipeline")
        if pipe_cfg_dict is not None:
            cfg = PipelineConfig.from_dict(pipe_cfg_dict)
        else:
            cfg = toy_config(mode)
        cfg.prompt_mode = mode
        ocfg = OptimConfig.from_dict({**optim_overrides, "seed": seed,
                                      **row.get("optim", {})})
        try:
            pipe = build_pipeline(cfg, class_names, seed)
            report = train(pipe, dataset, ocfg)
            out_rows.append({
                "config_name": name,
                "miou": report.final_eval_miou,
                "final_loss": report.loss_series[-1],
                "params": report.trainable_params,
                "text_fwd_train": report.text_fwd_train,
                "text_fwd_infer": report.text_fwd_infer,
            })
        except Exception as exc:  # noqa: BLE001 - failed rows are marked, suite continues
            out_rows.append({
                "config_name": name,
                "miou": "",
                "final_loss": "",
                "params": "",
                "text_fwd_train": "",
                "text_fwd_infer": "",
                "error": f"{type(exc).__name__}: {exc}",
            })
    return out_rows


CSV_COLUMNS = ["config_name", "miou", "final_loss", "params", "text_fwd_train", "text_fwd_infer"]


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
