"""Analytical training compute, GPU-hour and dollar accounting.

FLOPs convention: one multiply-accumulate counts as one FLOP and only
matmuls are counted.  For a tower of ``L`` layers, width ``d``, MLP width
``m`` and ``n`` sequence tokens::

    per layer  = 4*n*d*d        (Q, K, V, output projections)
               + 2*n*d*m        (MLP up and down)
               + 2*n*n*d        (attention scores and weighted values)
    embeddings = patch_tokens * P*P*3 * d  (image; every patch is embedded
                                            before masking)
               = 0                         (text; a table lookup)
    head       = d * embed_dim             (projection of the pooled token)

With ``m = 4d`` the per-layer term is ``12*n*d^2 + 2*n^2*d``.  Image
sequences hold the kept patch tokens plus the class token when the tower
has one.  This is exactly what :class:`clipa.autodiff.FlopCounter`
measures on a forward pass of the same tower.

"Training FLOPs" per sample is the forward compute of both towers; pass
``backward_multiplier=3`` for a forward+backward estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

from .masking import keep_count
from .models import ModelConfig, tokens_for_resolution


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class RateCard:
    price: float
    source: str = ""

    def __post_init__(self):
        if not self.price > 0:
            raise CostError(f"rate must be positive, got {self.price}")


GCP_A100 = RateCard(1.575, "Google Cloud, A100 80GB")
LAMBDA_A100 = RateCard(1.5, "Lambda Labs, A100 80GB")


def encoder_flops(config: ModelConfig, n_tokens: int, *, patch_tokens: int | None = None,
                  include_embed: bool = True, include_head: bool = True) -> int:
    """Forward MACs of one tower on a sequence of ``n_tokens``.

    ``patch_tokens`` is the number of patches embedded before masking
    (image towers; defaults to ``n_tokens`` minus the class token).
    """
    if n_tokens < 1:
        raise CostError(f"n_tokens must be >= 1, got {n_tokens}")
    n, d, m = n_tokens, config.width, config.mlp_width
    total = config.layers * (4 * n * d * d + 2 * n * d * m + 2 * n * n * d)
    if include_embed and config.tower == "image":
        if patch_tokens is None:
            patch_tokens = n - int(config.use_class_token)
        total += patch_tokens * config.patch_size ** 2 * 3 * d
    if include_head:
        total += d * config.embed_dim
    return total


def image_sequence(image_cfg: ModelConfig, image_side: int, mask_ratio: float) -> tuple[int, int]:
    """(patches embedded, tokens entering the transformer) at a resolution and mask ratio."""
    patches = tokens_for_resolution(image_side, image_cfg.patch_size)
    return patches, keep_count(patches, mask_ratio) + int(image_cfg.use_class_token)


def training_flops_per_sample(image_cfg: ModelConfig, text_cfg: ModelConfig, image_side: int,
                              mask_ratio: float, text_len: int,
                              backward_multiplier: int = 1) -> int:
    patches, seq = image_sequence(image_cfg, image_side, mask_ratio)
    fwd = encoder_flops(image_cfg, seq, patch_tokens=patches) + encoder_flops(text_cfg, text_len)
    return fwd * backward_multiplier


@dataclass
class StageCost:
    name: str
    image_side: int
    mask_ratio: float
    image_tokens: int
    text_tokens: int
    flops_per_sample: int
    samples: int
    role: str = "finetune"

    @property
    def flops(self) -> int:
        return self.flops_per_sample * self.samples


@dataclass
class CostReport:
    stages: list[StageCost] = field(default_factory=list)
    gpu_hours: float | None = None
    rate: RateCard | None = None

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.stages)

    def role_flops(self, role: str) -> int:
        return sum(s.flops for s in self.stages if s.role == role)

    def blended_flops_per_sample(self, role: str = "finetune") -> float:
        """Total FLOPs of ``role`` stages divided by their total samples."""
        picked = [s for s in self.stages if s.role == role]
        samples = sum(s.samples for s in picked)
        return sum(s.flops for s in picked) / samples if samples else 0.0

    @property
    def dollars(self) -> Decimal | None:
        if self.gpu_hours is None or self.rate is None:
            return None
        return dollar_cost(self.gpu_hours, self.rate)

    def __add__(self, other: "CostReport") -> "CostReport":
        hours = None
        if self.gpu_hours is not None and other.gpu_hours is not None:
            hours = self.gpu_hours + other.gpu_hours
        return CostReport(self.stages + other.stages, hours, self.rate or other.rate)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "role": s.role, "image_side": s.image_side,
                 "mask_ratio": s.mask_ratio, "image_tokens": s.image_tokens,
                 "text_tokens": s.text_tokens, "flops_per_sample": s.flops_per_sample,
                 "samples": s.samples, "flops": s.flops}
                for s in self.stages],
            "total_flops": self.total_flops,
            "blended_finetune_flops_per_sample": self.blended_flops_per_sample(),
            "gpu_hours": self.gpu_hours,
            "rate": None if self.rate is None else self.rate.price,
            "dollars": None if self.dollars is None else float(self.dollars),
        }

    def render(self) -> str:
        head = f"{'stage':<12} {'role':<9} {'res':>5} {'mask':>5} {'img tok':>8} {'txt tok':>8} " \
               f"{'FLOPs/sample':>14} {'samples':>14} {'FLOPs':>12}"
        lines = [head, "-" * len(head)]
        for s in self.stages:
            lines.append(
                f"{s.name:<12} {s.role:<9} {s.image_side:>5} {s.mask_ratio:>5.0%} {s.image_tokens:>8} "
                f"{s.text_tokens:>8} {format_flops(s.flops_per_sample):>14} {s.samples:>14,} "
                f"{s.flops:>12.3e}")
        lines.append(f"total compute: {self.total_flops:.4e} FLOPs")
        ft = self.blended_flops_per_sample()
        if ft:
            lines.append(f"blended finetune FLOPs/sample: {format_flops(ft)}")
        if self.gpu_hours is not None:
            lines.append(f"GPU hours: {self.gpu_hours:,.1f}")
        if self.dollars is not None:
            lines.append(f"est. cost: {format_dollars(self.dollars)}")
        return "\n".join(lines)


def stage_cost(image_cfg: ModelConfig, text_cfg: ModelConfig, stage, backward_multiplier: int = 1) -> StageCost:
    patches, seq = image_sequence(image_cfg, stage.image_side, stage.mask.ratio)
    return StageCost(
        name=stage.name, image_side=stage.image_side, mask_ratio=stage.mask.ratio,
        image_tokens=seq, text_tokens=stage.text_len,
        flops_per_sample=training_flops_per_sample(image_cfg, text_cfg, stage.image_side,
                                                   stage.mask.ratio, stage.text_len,
                                                   backward_multiplier),
        samples=stage.samples_seen, role=stage.role)


def plan_compute(plan, *, throughput: float | None = None, rate: RateCard | None = None,
                 backward_multiplier: int = 1) -> CostReport:
    """Per-stage and total compute of a :class:`~clipa.training.TrainPlan`.

    ``throughput`` (sustained FLOP/s per GPU, same convention) turns compute
    into GPU-hours; ``rate`` then prices them.
    """
    report = CostReport([stage_cost(plan.image_cfg, plan.text_cfg, s, backward_multiplier)
                         for s in plan.stages])
    if throughput is not None:
        if throughput <= 0:
            raise CostError("throughput must be positive")
        report.gpu_hours = report.total_flops / throughput / 3600.0
    report.rate = rate
    return report


def dollar_cost(gpu_hours, rate: RateCard | float) -> Decimal:
    """Exact ``gpu_hours * price``; round only for display (:func:`format_dollars`)."""
    price = rate.price if isinstance(rate, RateCard) else rate
    hours = Decimal(str(gpu_hours))
    if hours < 0:
        raise CostError(f"GPU hours must be non-negative, got {gpu_hours}")
    return hours * Decimal(str(price))


def round_dollars(amount) -> int:
    return int(Decimal(str(amount)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def format_dollars(amount) -> str:
    return f"${round_dollars(amount):,}"


def format_flops(flops: float) -> str:
    for unit, scale in (("T", 1e12), ("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(flops) >= scale:
            return f"{flops / scale:.1f}{unit}"
    return f"{flops:.0f}"


# -- comparisons ---------------------------------------------------------------------

@dataclass
class ComparisonRow:
    label: str
    gpu_hours: float
    rate: RateCard | None = GCP_A100
    metrics: dict = field(default_factory=dict)
    cost: Decimal | None = None  # given cost overrides hours * rate

    @property
    def dollars(self) -> Decimal | None:
        if self.cost is not None:
            return Decimal(str(self.cost))
        return None if self.rate is None else dollar_cost(self.gpu_hours, self.rate)


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    reference: str

    def ratio(self, label: str, reference: str | None = None) -> float:
        """Cost of ``label`` over cost of ``reference`` (GPU hours if unpriced)."""
        a, b = self._row(label), self._row(reference or self.reference)
        if a.dollars is not None and b.dollars is not None:
            return float(a.dollars / b.dollars)
        return a.gpu_hours / b.gpu_hours

    def ratios(self) -> dict[str, float]:
        if len(self.rows) < 2:
            return {}
        return {r.label: self.ratio(r.label) for r in self.rows if r.label != self.reference}

    def _row(self, label):
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def render(self) -> str:
        metric_names = sorted({k for r in self.rows for k in r.metrics})
        cols = ["model", "GPU hours", "est. cost", f"× {self.reference}" if len(self.rows) > 1 else ""]
        cols = [c for c in cols if c] + metric_names
        width = max(len(r.label) for r in self.rows) + 2
        lines = ["  ".join([cols[0].ljust(width)] + [c.rjust(12) for c in cols[1:]])]
        ratios = self.ratios()
        for r in self.rows:
            cells = [r.label.ljust(width), f"{r.gpu_hours:,.0f}".rjust(12),
                     (format_dollars(r.dollars) if r.dollars is not None else "-").rjust(12)]
            if len(self.rows) > 1:
                cells.append((format_ratio(ratios[r.label]) if r.label in ratios else "1×").rjust(12))
            cells += [f"{r.metrics[m]:.1f}".rjust(12) if m in r.metrics else "-".rjust(12)
                      for m in metric_names]
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "rows": [{"label": r.label, "gpu_hours": r.gpu_hours,
                      "dollars": None if r.dollars is None else float(r.dollars),
                      "display_cost": None if r.dollars is None else format_dollars(r.dollars),
                      "metrics": r.metrics} for r in self.rows],
            "ratios": self.ratios(),
        }


def format_ratio(ratio: float) -> str:
    return f"≈{ratio:.0f}×" if ratio >= 10 else f"≈{ratio:.1f}×"


def comparison_report(rows: Sequence[ComparisonRow], reference: str | None = None) -> ComparisonTable:
    """Tabulate rows and cost ratios against ``reference`` (default: cheapest row)."""
    rows = list(rows)
    if not rows:
        raise CostError("comparison needs at least one row")
    if reference is None:
        reference = min(rows, key=lambda r: (r.dollars if r.dollars is not None else r.gpu_hours)).label
    return ComparisonTable(rows, reference)


# Comparison rows: (label, GPU hours, printed cost, IN-1K zero-shot top-1).
# The OpenCLIP H/14 and L/14 costs imply ~$1.144/h, matching neither listed
# rate, so printed costs are kept as data rather than recomputed.
COMPARISON_ROWS = [
    ("OpenCLIP H/14 LAION-2B", 216_712, 247_864, 78.0),
    ("CLIPA-v2 H/14 LAION-2B", 8_640, 13_613, 79.1),
    ("OpenCLIP L/14 DataComp-1B", 41_472, 47_434, 79.2),
    ("OpenCLIP G/14 LAION-2B", 232_448, 366_105, 80.1),
    ("CLIPA-v2 H/14 DataComp-1B @70", 5_920, 9_324, 81.1),
    ("CLIPA-v2 L/14 DataComp-1B @84", 4_008, 6_318, 79.7),
    ("CLIPA-v2 H/14 DataComp-1B @84", 7_776, 12_247, 81.5),
]


def cost_comparison_table(recompute: bool = True, reference: str = "CLIPA-v2 H/14 DataComp-1B @70") -> ComparisonTable:
    """Cost comparison of large image-text training runs; ``recompute`` prices hours at $1.575/h instead of printed costs."""
    rows = [ComparisonRow(label, hours, GCP_A100, {"IN-1K": acc},
                          cost=None if recompute else Decimal(cost))
            for label, hours, cost, acc in COMPARISON_ROWS]
    return comparison_report(rows, reference)
