"""Run configuration files (YAML) with strict key checking.

Top-level keys::

    seed: int                      global seed (model init, masks, data)
    out: str                       output directory
    data:   {kind, seed, train_size, eval_seed, eval_size, manifest, eval_manifest, fail_fast}
    model:  {preset, patch_size, image_size, context_len, image: {...}, text: {...}}
    stages: list of {name, role, image_side, mask: {strategy, ratio, seed}, text_len,
                     samples_seen, batch_size, peak_lr, warmup_samples, lr_floor,
                     weight_decay, betas, grad_clip}
    eval:   {mode, templates, text_len}
    sweep:  {sizes, ratios}
    cost:   {throughput, backward_multiplier}
    rates:  list of {price, source}

Unknown keys anywhere raise :class:`ConfigError` naming the dotted key path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .cost import RateCard
from .data import toy_vocab
from .masking import MaskError, MaskSpec
from .models import FLOPS_PRESETS, TOY_PRESETS, ModelConfig, toy_preset
from .training import StageConfig, TrainPlan


class ConfigError(ValueError):
    pass


_TOP = {"seed", "out", "data", "model", "stages", "eval", "sweep", "cost", "rates"}
_DATA = {"kind", "seed", "train_size", "eval_seed", "eval_size", "manifest", "eval_manifest",
         "fail_fast"}
_MODEL = {"preset", "patch_size", "image_size", "context_len", "image", "text"}
_TOWER = {"layers", "width", "heads", "embed_dim", "mlp_ratio", "patch_size", "use_class_token",
          "vocab_size", "context_len", "image_size"}
_STAGE = {f.name for f in fields(StageConfig)}
_MASK = {"strategy", "ratio", "seed"}
_EVAL = {"mode", "templates", "text_len"}
_SWEEP = {"sizes", "ratios"}
_COST = {"throughput", "backward_multiplier"}
_RATE = {"price", "source"}


def _check(section: dict, allowed: set, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    for k in section:
        if k not in allowed:
            key = f"{where}.{k}" if where else k
            raise ConfigError(f"unknown config key '{key}'")
    return section


@dataclass
class DataConfig:
    kind: str = "synthetic"
    seed: int = 0
    train_size: int = 4096
    eval_seed: int = 1
    eval_size: int = 512
    manifest: str | None = None
    eval_manifest: str | None = None
    fail_fast: bool = True


@dataclass
class RunConfig:
    plan: TrainPlan
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs/default"
    eval_mode: str = "both"
    templates: tuple[str, ...] = ("a photo of a {}",)
    eval_text_len: int | None = None
    sweep_sizes: list[str] = field(default_factory=lambda: list(TOY_PRESETS[:3]))
    sweep_ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    throughput: float | None = None
    backward_multiplier: int = 1
    rates: list[RateCard] = field(default_factory=list)
    source_path: str | None = None


def _tower(base: ModelConfig | None, raw: dict, tower: str, where: str) -> ModelConfig:
    raw = _check(raw, _TOWER, where)
    try:
        if base is None:
            return ModelConfig(tower, **raw)
        return replace(base, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _model(raw: dict, first_side: int | None) -> tuple[ModelConfig, ModelConfig]:
    raw = _check(raw, _MODEL, "model")
    preset = raw.get("preset", "toy-B")
    patch = raw.get("patch_size")
    vocab = len(toy_vocab())
    if preset in FLOPS_PRESETS:
        img, txt = FLOPS_PRESETS[preset]
        if patch:
            img = replace(img, patch_size=patch)
    elif preset in TOY_PRESETS:
        img, txt = toy_preset(preset, vocab, image_size=raw.get("image_size") or first_side or 32,
                              context_len=raw.get("context_len", 8), patch_size=patch or 8)
    else:
        raise ConfigError(f"model.preset: unknown preset {preset!r}")
    if first_side is not None:
        img = replace(img, image_size=first_side)
    img = _tower(img, raw.get("image"), "image", "model.image")
    txt = _tower(txt, raw.get("text"), "text", "model.text")
    if img.embed_dim != txt.embed_dim:
        raise ConfigError("model: image and text embed_dim differ")
    return img, txt


def _stage(raw: dict, i: int, seed: int, default_lr: float | None) -> StageConfig:
    where = f"stages[{i}]"
    raw = dict(_check(raw, _STAGE, where))
    if default_lr is not None:
        raw.setdefault("peak_lr", default_lr)
    mask = _check(raw.pop("mask", None), _MASK, f"{where}.mask")
    try:
        spec = MaskSpec(mask.get("strategy", "random" if mask.get("ratio") else "none"),
                        float(mask.get("ratio", 0.0)), int(mask.get("seed", seed)))
    except MaskError as exc:
        raise ConfigError(f"{where}.mask: {exc}") from exc
    if "betas" in raw:
        raw["betas"] = tuple(raw["betas"])
    raw.setdefault("name", f"stage{i}")
    if "image_side" not in raw:
        raise ConfigError(f"{where}: missing required key 'image_side'")
    try:
        return StageConfig(mask=spec, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: dict, source_path: str | None = None) -> RunConfig:
    raw = _check(raw or {}, _TOP, "")
    seed = int(raw.get("seed", 0))
    stages_raw = raw.get("stages")
    if not stages_raw or not isinstance(stages_raw, list):
        raise ConfigError("config needs a non-empty 'stages' list")
    # later stages default to a tenth of the first stage's peak learning rate
    stages = [_stage(stages_raw[0], 0, seed, None)]
    stages += [_stage(s, i, seed, 0.1 * stages[0].peak_lr)
               for i, s in enumerate(stages_raw[1:], start=1)]
    img, txt = _model(raw.get("model"), stages[0].image_side)
    try:
        plan = TrainPlan(img, txt, stages, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = DataConfig(**_check(raw.get("data"), _DATA, "data"))
    if data.kind not in ("synthetic", "manifest"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'manifest', got {data.kind!r}")
    ev = _check(raw.get("eval"), _EVAL, "eval")
    sw = _check(raw.get("sweep"), _SWEEP, "sweep")
    co = _check(raw.get("cost"), _COST, "cost")
    rates = []
    for i, r in enumerate(raw.get("rates") or []):
        r = _check(r, _RATE, f"rates[{i}]")
        try:
            rates.append(RateCard(float(r["price"]), r.get("source", "")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"rates[{i}]: {exc}") from exc
    cfg = RunConfig(plan=plan, data=data, out=str(raw.get("out", "runs/default")),
                    source_path=source_path, rates=rates,
                    throughput=co.get("throughput"),
                    backward_multiplier=int(co.get("backward_multiplier", 1)))
    if ev:
        cfg.eval_mode = ev.get("mode", cfg.eval_mode)
        cfg.templates = tuple(ev.get("templates", cfg.templates))
        cfg.eval_text_len = ev.get("text_len")
    if sw:
        cfg.sweep_sizes = list(sw.get("sizes", cfg.sweep_sizes))
        cfg.sweep_ratios = [float(r) for r in sw.get("ratios", cfg.sweep_ratios)]
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML config; top-level ``overrides`` (e.g. from CLI flags) win."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if overrides:
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(raw, str(path))


def load_rates(path) -> list[RateCard]:
    """Rate cards from a YAML file: a list of {price, source}, or {rates: [...]}."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read rates file {path}: {exc}") from exc
    if isinstance(raw, dict):
        raw = _check(raw, {"rates"}, "").get("rates")
    out = []
    for i, r in enumerate(raw or []):
        r = _check(r, _RATE, f"rates[{i}]")
        try:
            out.append(RateCard(float(r["price"]), r.get("source", "")))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"rates[{i}]: {exc}") from exc
    return out
