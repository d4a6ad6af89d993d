"""``clipa`` command line: data generation, training, evaluation, cost estimates, sweeps, reports.

Exit codes: 0 success, 1 runtime error, 2 usage or config error.
Outputs land under ``--out``: ``checkpoints/``, ``logs/metrics.jsonl``,
``reports/*.json`` (plus CSV tables and PNG figures from ``report``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config, load_rates
from .cost import (GCP_A100, CostError, RateCard, comparison_report, dollar_cost,
                   format_dollars, format_flops, format_ratio, image_sequence, encoder_flops,
                   plan_compute, cost_comparison_table)
from .data import DataError, ManifestSource, SyntheticSource, class_names, write_dataset
from .evaluation import EvalError, EvalReport, evaluate, render_reports
from .masking import MaskError, make_block_mask, make_grid_mask, make_random_mask
from .models import FLOPS_PRESETS, TOY_PRESETS, ResolutionError, toy_preset
from .training import ContractError, TrainingError, mask_ratio_sweep, run_plan

log = logging.getLogger("clipa")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
_RUNTIME_ERRORS = (TrainingError, ContractError, DataError, EvalError, CheckpointError, CostError,
                   MaskError, ResolutionError, OSError)


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _train_source(cfg: RunConfig):
    if cfg.data.kind == "manifest":
        if not cfg.data.manifest:
            raise ConfigError("data.manifest is required when data.kind is 'manifest'")
        return ManifestSource(cfg.data.manifest, split=None)
    return SyntheticSource(cfg.data.seed, cfg.data.train_size)


def _eval_samples(cfg: RunConfig, side: int):
    if cfg.data.kind == "manifest":
        if not cfg.data.eval_manifest:
            return []
        return ManifestSource(cfg.data.eval_manifest).labeled(side)
    return SyntheticSource(cfg.data.eval_seed, cfg.data.eval_size).labeled(side)


def _rate(args) -> RateCard:
    return RateCard(args.rate, "command line") if args.rate is not None else GCP_A100


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = write_dataset(args.out, args.seed, args.count, args.resolution, args.split, args.offset)
    print(f"wrote {args.count} samples to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
    out = Path(cfg.out)
    plan = cfg.plan
    _write_json(out / "reports" / "plan.json", {
        "seed": plan.seed, "model": plan.build_model().config_dict(),
        "stages": [asdict(s) for s in plan.stages]})
    model, reports = run_plan(plan, _train_source(cfg), out_dir=out)
    rate = cfg.rates[0] if cfg.rates else GCP_A100
    cost = plan_compute(plan, throughput=cfg.throughput, rate=rate,
                        backward_multiplier=cfg.backward_multiplier)
    _write_json(out / "reports" / "cost.json", cost.to_dict())
    for r in reports:
        print(f"stage {r.name}: {r.steps} steps @ {r.image_side}px, mask {r.mask_ratio:g} ({r.strategy}), "
              f"final loss {r.final_loss:.4f}, {format_flops(r.flops_per_step)} FLOPs/step")
    samples = _eval_samples(cfg, model.image_side)
    if samples:
        report = evaluate(model, samples, cfg.eval_mode, templates=cfg.templates,
                          text_len=cfg.eval_text_len)
        (out / "reports" / "eval.json").write_text(report.to_json() + "\n")
        print(render_reports([("final", report)]))
    print(cost.render())
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    side = args.resolution or model.image_side
    if args.resolution and args.resolution != model.image_side:
        model.set_grid(args.resolution // model.image_cfg.patch_size)
    if args.dataset == "synthetic":
        samples = SyntheticSource(args.data_seed, args.count).labeled(side)
    else:
        samples = ManifestSource(args.dataset, split=args.split).labeled(side)
    if not samples:
        raise DataError(f"no samples in {args.dataset}")
    templates = tuple(args.template) if args.template else ("a photo of a {}",)
    report = evaluate(model, samples, args.mode, names=class_names(), templates=templates,
                      text_len=args.text_len)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(render_reports([(Path(args.checkpoint).stem, report)]))
    return EXIT_OK


def _preset_estimate(args) -> dict:
    if args.preset in FLOPS_PRESETS:
        img, txt = FLOPS_PRESETS[args.preset]
    else:
        img, txt = toy_preset(args.preset, 16, image_size=args.res)
    patches, seq = image_sequence(img, args.res, args.mask)
    img_f = encoder_flops(img, seq, patch_tokens=patches)
    txt_f = encoder_flops(txt, args.text_len)
    mult = args.backward_multiplier or 1
    return {"preset": args.preset, "image_side": args.res, "mask_ratio": args.mask,
            "text_len": args.text_len, "patches": patches, "image_tokens": seq,
            "image_flops": img_f * mult, "text_flops": txt_f * mult,
            "flops_per_sample": (img_f + txt_f) * mult, "backward_multiplier": mult}


def cmd_estimate(args) -> int:
    if not any([args.config, args.preset, args.gpu_hours is not None, args.compare]):
        args.parser.print_usage(sys.stderr)
        print("estimate: give --gpu-hours, --preset, --config or --compare", file=sys.stderr)
        return EXIT_USAGE
    rates = load_rates(args.rates_file) if args.rates_file else [_rate(args)]
    result: dict = {}
    lines: list[str] = []
    if args.gpu_hours is not None:
        if args.gpu_hours < 0:
            raise UsageError("--gpu-hours must be non-negative")
        costs = []
        for card in rates:
            exact = dollar_cost(args.gpu_hours, card)
            costs.append({"rate": card.price, "source": card.source, "exact": str(exact),
                          "display": format_dollars(exact)})
            lines.append(f"{args.gpu_hours:,g} GPU hours x ${card.price}/h = {format_dollars(exact)}"
                         + (f"  ({card.source})" if card.source else ""))
        result["cost"] = costs
    if args.preset:
        est = _preset_estimate(args)
        result["per_sample"] = est
        lines.append(f"{est['preset']} @ {est['image_side']}px, mask {est['mask_ratio']:.0%}, "
                     f"text {est['text_len']}: image tokens {est['image_tokens']} "
                     f"({est['patches']} patches), image {format_flops(est['image_flops'])} + "
                     f"text {format_flops(est['text_flops'])} = "
                     f"{format_flops(est['flops_per_sample'])} FLOPs per sample")
    if args.config:
        cfg = load_config(args.config)
        throughput = args.throughput or cfg.throughput
        explicit = args.rates_file or args.rate is not None
        rate = cfg.rates[0] if cfg.rates and not explicit else rates[0]
        report = plan_compute(cfg.plan, throughput=throughput, rate=rate,
                              backward_multiplier=args.backward_multiplier or cfg.backward_multiplier)
        result["plan"] = report.to_dict()
        lines.append(report.render())
    if args.compare:
        table = cost_comparison_table(recompute=not args.printed)
        if args.rate is not None or args.rates_file:
            table = comparison_report([replace(r, rate=rates[0]) for r in table.rows], table.reference)
        result["comparison"] = table.to_dict()
        lines.append(table.render())
        big = max(table.rows, key=lambda r: r.dollars)
        lines.append(f"{big.label} vs {table.reference}: {table.ratio(big.label):.2f} "
                     f"({format_ratio(table.ratio(big.label))})")
    print(json.dumps(result, indent=2, sort_keys=True) if args.json else "\n\n".join(lines))
    return EXIT_OK


def _sweep_eval(cfg: RunConfig):
    cache = {}

    def top1(model) -> float:
        side = model.image_side
        if side not in cache:
            cache[side] = _eval_samples(cfg, side)
        return evaluate(model, cache[side], "classify", templates=cfg.templates,
                        text_len=cfg.eval_text_len).top1

    return top1


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
    sizes = {}
    for name in cfg.sweep_sizes:
        if name not in TOY_PRESETS:
            raise ConfigError(f"sweep.sizes: unknown toy preset {name!r}")
        img, txt = toy_preset(name, cfg.plan.text_cfg.vocab_size, image_size=cfg.plan.image_cfg.image_size,
                              context_len=cfg.plan.text_cfg.context_len,
                              patch_size=cfg.plan.image_cfg.patch_size)
        sizes[name] = (img, txt)
    table = mask_ratio_sweep(sizes, cfg.sweep_ratios, cfg.plan, _train_source(cfg), _sweep_eval(cfg))
    out = Path(cfg.out) / "reports"
    _write_json(out / "drop_table.json", table.to_dict())
    (out / "drop_table.txt").write_text(table.render() + "\n")
    print(table.render())
    return EXIT_OK


def _read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_report(args) -> int:
    from . import plotting

    run = Path(args.run) if args.run else None
    out = Path(args.out) if args.out else (run / "reports" if run else Path("report"))
    if run is not None and not (run / "logs").is_dir() and not (run / "reports").is_dir():
        raise DataError(f"no logs/ or reports/ under {run}; is it a train or sweep output directory?")
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    text: list[str] = []

    if run is not None:
        metrics = run / "logs" / "metrics.jsonl"
        if metrics.exists():
            recs = _read_jsonl(metrics)
            cols = ["step", "stage", "loss", "lr", "flops", "wall_ms"]
            written.append(_write_csv(out / "metrics.csv", cols, ([r[c] for c in cols] for r in recs)))
            if recs:
                written.append(plotting.plot_loss_curves(recs, out / "loss_curves.png"))
        stages_path = run / "reports" / "stages.json"
        if stages_path.exists():
            stages = json.loads(stages_path.read_text())
            cols = ["name", "steps", "samples", "image_side", "mask_ratio", "strategy", "final_loss",
                    "mean_loss_tail", "flops_per_step", "resized_pos_embed"]
            written.append(_write_csv(out / "stages.csv", cols, ([s[c] for c in cols] for s in stages)))
            written.append(plotting.plot_stage_flops(stages, out / "stage_flops.png"))
        cost_path = run / "reports" / "cost.json"
        if cost_path.exists():
            cost = json.loads(cost_path.read_text())
            cols = ["name", "role", "image_side", "mask_ratio", "image_tokens", "text_tokens",
                    "flops_per_sample", "samples", "flops"]
            written.append(_write_csv(out / "cost.csv", cols, ([s[c] for c in cols] for s in cost["stages"])))
        drop_path = run / "reports" / "drop_table.json"
        if drop_path.exists():
            drop = json.loads(drop_path.read_text())
            written.append(_write_csv(out / "drop_table.csv", ["size", "ratio", "accuracy", "drop"],
                                      ([r["size"], r["ratio"], r["accuracy"], r["drop"]] for r in drop["rows"])))
            written.append(plotting.plot_drop_table(drop, out / "drop_table.png"))

    evals = []
    if run is not None and (run / "reports" / "eval.json").exists():
        evals.append((run.name, EvalReport.from_json((run / "reports" / "eval.json").read_text())))
    for item in args.eval or []:
        label, _, path = item.rpartition("=")
        evals.append((label or Path(path).stem, EvalReport.from_json(Path(path).read_text())))
    if evals:
        cols = ["label", "top1", "i2t@1", "i2t@5", "i2t@10", "t2i@1", "t2i@5", "t2i@10", "n_samples"]
        rows = [[lab, r.top1, *(r.recall_i2t.get(k) for k in ("1", "5", "10")),
                 *(r.recall_t2i.get(k) for k in ("1", "5", "10")), r.n_samples] for lab, r in evals]
        written.append(_write_csv(out / "eval.csv", cols, rows))
        text.append(render_reports(evals))

    table = cost_comparison_table(recompute=True)
    tdict = table.to_dict()
    written.append(_write_csv(out / "cost_comparison.csv",
                              ["label", "gpu_hours", "dollars", "display_cost", "ratio_vs_reference", "IN-1K"],
                              ([r["label"], r["gpu_hours"], r["dollars"], r["display_cost"],
                                tdict["ratios"].get(r["label"], 1.0), r["metrics"].get("IN-1K")]
                               for r in tdict["rows"])))
    written.append(plotting.plot_cost_comparison(tdict, out / "cost_comparison.png"))
    text.append(table.render())

    written.append(plotting.plot_masks([
        ("random 50%", make_random_mask(14, 14, 0.5, 0, 0)),
        ("block 50%", make_block_mask(14, 14, 0.5, 0, 0)),
        ("grid 75%", make_grid_mask(14, 14, 0.75)),
    ], out / "mask_strategies.png"))

    report_txt = out / "report.txt"
    report_txt.write_text("\n\n".join(text) + "\n")
    print("\n\n".join(text))
    for p in written + [report_txt]:
        print(f"wrote {p}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipa", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-data", help="render synthetic PNGs and a manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="train")
    g.add_argument("--offset", type=int, default=0, help="first sample index")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a multi-stage training plan")
    t.add_argument("config")
    t.add_argument("--seed", type=int, help="override the config's global seed")
    t.add_argument("--out", help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot classification and retrieval of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="manifest.jsonl path, or 'synthetic'")
    e.add_argument("--mode", choices=("classify", "retrieval", "both"), default="both")
    e.add_argument("--out", help="write the EvalReport JSON here")
    e.add_argument("--split", help="manifest split filter")
    e.add_argument("--data-seed", type=int, default=1, help="synthetic dataset seed")
    e.add_argument("--count", type=int, default=512, help="synthetic sample count")
    e.add_argument("--resolution", type=int, help="evaluate at this resolution (resizes pos. embeddings)")
    e.add_argument("--text-len", type=int)
    e.add_argument("--template", action="append", help="prompt template with {} (repeatable)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("estimate", help="FLOPs, GPU-hour and dollar estimates")
    s.add_argument("--config", help="price a training plan")
    s.add_argument("--preset", choices=sorted(FLOPS_PRESETS) + list(TOY_PRESETS))
    s.add_argument("--res", type=int, default=224)
    s.add_argument("--mask", type=float, default=0.0)
    s.add_argument("--text-len", type=int, default=32)
    s.add_argument("--gpu-hours", type=float)
    s.add_argument("--rate", type=float, help="price per GPU hour (default 1.575)")
    s.add_argument("--rates-file", help="YAML list of {price, source}")
    s.add_argument("--throughput", type=float, help="sustained FLOP/s per GPU for --config")
    s.add_argument("--backward-multiplier", type=int, default=None, choices=(1, 3))
    s.add_argument("--compare", action="store_true", help="training-cost comparison table of large image-text models")
    s.add_argument("--printed", action="store_true", help="with --compare, use printed costs")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_estimate, parser=s)

    w = sub.add_parser("sweep", help="finetuning mask-ratio sweep across model sizes")
    w.add_argument("config")
    w.add_argument("--seed", type=int)
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="CSV tables and PNG figures from run outputs")
    r.add_argument("run", nargs="?", help="training output directory")
    r.add_argument("--out", help="report directory (default RUN/reports)")
    r.add_argument("--eval", action="append", help="extra EvalReport JSON, as LABEL=PATH")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"clipa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"clipa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
