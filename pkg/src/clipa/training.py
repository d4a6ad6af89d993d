"""Contrastive training: loss, optimizer, schedule and multi-stage plans."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .cost import CostReport, stage_cost
from .data import tokenize_batch, toy_vocab
from .masking import MaskSpec, make_mask
from .models import ClipModel, ModelConfig, encode_images, encode_texts, tokens_for_resolution

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# -- loss -----------------------------------------------------------------------

def infonce_loss(img_emb: Tensor, txt_emb: Tensor, logit_scale) -> Tensor:
    """Symmetric cross-entropy over the ``B x B`` similarity matrix.

    ``loss = (CE(rows) + CE(columns)) / 2`` with pair ``i`` as the target of
    row ``i`` and column ``i``.  Rows must be unit-norm.
    """
    img_emb, txt_emb = ad.as_tensor(img_emb), ad.as_tensor(txt_emb)
    if img_emb.ndim != 2 or img_emb.shape != txt_emb.shape or img_emb.shape[0] < 1:
        raise ContractError(f"need matching [B, e] embeddings, got {img_emb.shape} and {txt_emb.shape}")
    for name, e in (("image", img_emb), ("text", txt_emb)):
        norms = np.linalg.norm(e.data.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ContractError(f"{name} embeddings are not L2-normalized (norms {norms.min():.4f}..{norms.max():.4f})")
    bsz = img_emb.shape[0]
    logits = (img_emb @ txt_emb.T) * logit_scale
    eye = np.eye(bsz, dtype=logits.data.dtype)
    i2t = ad.sum_(ad.log_softmax(logits, axis=1) * eye)
    t2i = ad.sum_(ad.log_softmax(logits, axis=0) * eye)
    return (i2t + t2i) * (-0.5 / bsz)


# -- optimizer and schedule ----------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: AdamWState, lr: float,
               betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.2,
               decay_mask: list[bool] | None = None) -> AdamWState:
    """In-place AdamW update.

    ``m = b1*m + (1-b1)*g``, ``v = b2*v + (1-b2)*g^2``, then
    ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`` with bias-corrected
    ``m_hat``, ``v_hat``.  ``decay_mask`` selects which params are decayed.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ContractError("optimizer state does not match parameter shapes")
    bad = [p.name or str(i) for i, (p, g) in enumerate(zip(params, grads)) if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients in {', '.join(bad[:5])}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if wd:
            update = update + wd * p.data
        p.data -= (lr * update).astype(p.data.dtype)
    return state


def cosine_lr(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float) -> float:
    """Linear warmup from 0 to ``peak``, then half-cosine down to ``floor`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def decay_mask_for(model: ClipModel) -> list[bool]:
    """Weight decay only on matmul weights (no biases, norms, embeddings, temperature)."""
    skip = ("pos", "cls", "tok_emb")
    return [t.ndim >= 2 and not any(name.endswith(s) for s in skip)
            for name, t in model.params.items()]


# -- plans -----------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    name: str
    image_side: int
    mask: MaskSpec = MaskSpec()
    text_len: int = 8
    samples_seen: int = 1024
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_samples: int = 0
    lr_floor: float = 0.0
    weight_decay: float = 0.2
    role: str = "finetune"
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.samples_seen < self.batch_size:
            raise ValueError(f"stage {self.name!r}: samples_seen must be >= batch_size >= 1")
        if self.text_len < 1:
            raise ValueError(f"stage {self.name!r}: text_len must be >= 1")
        if self.role not in ("pretrain", "finetune"):
            raise ValueError(f"stage {self.name!r}: role must be pretrain or finetune")

    @property
    def steps(self) -> int:
        return self.samples_seen // self.batch_size

    @property
    def warmup_steps(self) -> int:
        return min(self.steps, self.warmup_samples // self.batch_size)


@dataclass
class TrainPlan:
    image_cfg: ModelConfig
    text_cfg: ModelConfig
    stages: list[StageConfig]
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        for s in self.stages:
            tokens_for_resolution(s.image_side, self.image_cfg.patch_size)
            if s.text_len > self.text_cfg.context_len:
                raise ValueError(f"stage {s.name!r}: text_len {s.text_len} exceeds context {self.text_cfg.context_len}")
        sides = [s.image_side for s in self.stages if s.role == "finetune"]
        if any(b < a for a, b in zip(sides, sides[1:])):
            warnings.warn("finetune resolutions decrease across stages", stacklevel=2)

    def build_model(self) -> ClipModel:
        """Fresh model whose positional grid matches the first stage."""
        img = replace(self.image_cfg, image_size=self.stages[0].image_side)
        return ClipModel(img, self.text_cfg, seed=self.seed)


@dataclass
class StageReport:
    name: str
    steps: int
    samples: int
    image_side: int
    mask_ratio: float
    strategy: str
    final_loss: float
    mean_loss_tail: float
    flops_per_step: float
    resized_pos_embed: bool
    cost: CostReport
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name, "steps": self.steps, "samples": self.samples,
            "image_side": self.image_side, "mask_ratio": self.mask_ratio,
            "strategy": self.strategy, "final_loss": self.final_loss,
            "mean_loss_tail": self.mean_loss_tail, "flops_per_step": self.flops_per_step,
            "resized_pos_embed": self.resized_pos_embed, "cost": self.cost.to_dict(),
            "checkpoint": self.checkpoint,
        }


class MetricsLog:
    """Per-step records, optionally streamed to a JSON Lines file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def train_stage(model: ClipModel, stage: StageConfig, data_stream: Iterator, *,
                vocab: dict | None = None, sample_offset: int = 0, step_offset: int = 0,
                metrics: MetricsLog | None = None, checkpoint_dir=None,
                clock: Callable[[], float] = time.perf_counter) -> StageReport:
    """Run ``stage.steps`` optimizer steps on ``model`` in place.

    Sample ``j`` of step ``s`` gets mask index ``sample_offset + s*B + j``,
    so masks depend only on the global sample counter.
    """
    vocab = vocab or toy_vocab()
    metrics = metrics or MetricsLog()
    patch = model.image_cfg.patch_size
    grid = stage.image_side // patch
    resized = model.set_grid(grid)
    names = list(model.params)
    decay = decay_mask_for(model)
    state = AdamWState()
    bsz = stage.batch_size
    losses, flops = [], []
    for step in range(stage.steps):
        t0 = clock()
        batch = [next(data_stream) for _ in range(bsz)]
        images = np.stack([b[0] for b in batch])
        if images.shape[1:3] != (stage.image_side, stage.image_side):
            raise ContractError(f"stage {stage.name!r} expects {stage.image_side}px images, got {images.shape[1:3]}")
        ids, real = tokenize_batch([b[1] for b in batch], vocab, stage.text_len)
        base = sample_offset + step * bsz
        kept = np.stack([make_mask(stage.mask, grid, grid, base + j).as_array() for j in range(bsz)])
        params = [model.params[n] for n in names]
        for p in params:
            p.grad = None
        with ad.FlopCounter() as fc:
            img = encode_images(model, images, kept)
            txt = encode_texts(model, ids, real)
            loss = infonce_loss(img, txt, model.logit_scale())
        value = loss.item()
        if not math.isfinite(value):
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = save_checkpoint(model, Path(checkpoint_dir) / "last_good.ckpt")
            raise TrainingError(f"non-finite loss at stage {stage.name!r} step {step}", ckpt)
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        clip_grad_norm(grads, stage.grad_clip)
        lr = cosine_lr(step + 1, stage.steps, stage.warmup_steps, stage.peak_lr, stage.lr_floor)
        adamw_step(params, grads, state, lr, stage.betas, weight_decay=stage.weight_decay,
                   decay_mask=decay)
        losses.append(value)
        flops.append(fc.macs)
        metrics.write({"step": step_offset + step, "stage": stage.name, "loss": value, "lr": lr,
                       "flops": fc.macs, "wall_ms": round((clock() - t0) * 1000.0, 3)})
    ckpt_path = None
    if checkpoint_dir is not None:
        ckpt_path = str(save_checkpoint(model, Path(checkpoint_dir) / f"{stage.name}.ckpt"))
    tail = losses[-max(1, len(losses) // 10):]
    return StageReport(
        name=stage.name, steps=stage.steps, samples=stage.steps * bsz, image_side=stage.image_side,
        mask_ratio=stage.mask.ratio, strategy=stage.mask.strategy, final_loss=losses[-1],
        mean_loss_tail=float(np.mean(tail)), flops_per_step=float(np.mean(flops)),
        resized_pos_embed=resized, cost=CostReport([stage_cost(model.image_cfg, model.text_cfg, stage)]),
        checkpoint=ckpt_path)


def run_plan(plan: TrainPlan, data_source: Callable[[int], Iterator], *, vocab: dict | None = None,
             model: ClipModel | None = None, out_dir=None,
             stages: list[StageConfig] | None = None,
             metrics: MetricsLog | None = None) -> tuple[ClipModel, list[StageReport]]:
    """Execute the plan's stages in order, carrying parameters across stages.

    ``data_source(resolution)`` returns a fresh (image, caption) iterator.
    With ``out_dir``, writes ``checkpoints/``, ``logs/metrics.jsonl`` and
    ``reports/stages.json``.
    """
    model = model or plan.build_model()
    out = Path(out_dir) if out_dir is not None else None
    if metrics is None:
        metrics = MetricsLog(out / "logs" / "metrics.jsonl" if out else None)
    reports = []
    samples = steps = 0
    try:
        for stage in (stages or plan.stages):
            rep = train_stage(model, stage, data_source(stage.image_side), vocab=vocab,
                              sample_offset=samples, step_offset=steps, metrics=metrics,
                              checkpoint_dir=out / "checkpoints" if out else None)
            log.info("stage %s: %d steps, final loss %.4f", stage.name, rep.steps, rep.final_loss)
            samples += rep.samples
            steps += rep.steps
            reports.append(rep)
    finally:
        metrics.close()
    if out:
        save_checkpoint(model, out / "checkpoints" / "final.ckpt")
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "reports" / "stages.json").write_text(
            json.dumps([r.to_dict() for r in reports], indent=2))
    return model, reports


# -- finetuning sweep ------------------------------------------------------------------------

@dataclass
class DropTable:
    sizes: list[str]
    ratios: list[float]
    accuracy: dict = field(default_factory=dict)   # (size, ratio) -> accuracy

    def drop(self, size: str, ratio: float) -> float:
        return self.accuracy[(size, 0.0)] - self.accuracy[(size, ratio)]

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes, "ratios": self.ratios,
            "rows": [{"size": s, "ratio": r, "accuracy": self.accuracy[(s, r)], "drop": self.drop(s, r)}
                     for s in self.sizes for r in self.ratios],
        }

    def render(self) -> str:
        head = f"{'model':<10}" + "".join(f"{f'{1 - r:.0%} kept':>12}" for r in self.ratios)
        lines = [head, "-" * len(head)]
        for s in self.sizes:
            lines.append(f"{s:<10}" + "".join(f"{-100 * self.drop(s, r):>+11.1f}%" for r in self.ratios))
        return "\n".join(lines)


class MissingBaselineError(ValueError):
    pass


def mask_ratio_sweep(model_sizes: dict[str, tuple[ModelConfig, ModelConfig]],
                          mask_ratios: list[float], base_plan: TrainPlan,
                          data_source: Callable[[int], Iterator], evaluate: Callable[[ClipModel], float],
                          vocab: dict | None = None) -> DropTable:
    """Finetune each size at each mask ratio from its own pretrained checkpoint.

    The last stage of ``base_plan`` is the finetune stage (its mask ratio is
    swept, random strategy); earlier stages pretrain once per size.  Drops
    are relative to the same size finetuned with all tokens.
    """
    if 0.0 not in mask_ratios:
        raise MissingBaselineError("mask_ratios must include 0.0 (full-token baseline)")
    *pre, finetune = base_plan.stages
    table = DropTable(list(model_sizes), list(mask_ratios))
    for size, (img_cfg, txt_cfg) in model_sizes.items():
        plan = replace(base_plan, image_cfg=img_cfg, text_cfg=txt_cfg)
        pretrained = plan.build_model()
        samples = 0
        for st in pre:
            train_stage(pretrained, st, data_source(st.image_side), vocab=vocab, sample_offset=samples)
            samples += st.steps * st.batch_size
        for r in mask_ratios:
            model = pretrained.copy()
            spec = MaskSpec("random" if r else "none", r, finetune.mask.seed)
            train_stage(model, replace(finetune, mask=spec), data_source(finetune.image_side),
                        vocab=vocab, sample_offset=samples)
            table.accuracy[(size, r)] = evaluate(model)
    return table
