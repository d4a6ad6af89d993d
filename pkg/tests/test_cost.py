from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from clipa.cost import (GCP_A100, LAMBDA_A100, ComparisonRow, CostError, CostReport, RateCard, comparison_report,
                        dollar_cost, encoder_flops, format_dollars, format_ratio, plan_compute, round_dollars,
                        cost_comparison_table, training_flops_per_sample)
from clipa.masking import MaskSpec
from clipa.models import FLOPS_PRESETS, ModelConfig
from clipa.training import StageConfig, TrainPlan

from oracles import count_macs, vit_matmul_shapes

H14_IMG, H14_TXT = FLOPS_PRESETS["H14"]


def _tower(layers, width):
    return ModelConfig("text", layers, width, 1, 1, vocab_size=10, context_len=8)


def test_encoder_flops_hand_expansion():
    assert encoder_flops(_tower(1, 4), 2, include_embed=False, include_head=False) == 416


def test_encoder_flops_linear_regime():
    cfg = _tower(2, 512)
    assert abs(encoder_flops(cfg, 8, include_head=False) / encoder_flops(cfg, 4, include_head=False) - 2) < 0.01


def test_h14_image_tower_against_op_graph_oracle():
    ops = vit_matmul_shapes(32, 1280, 16, 5120, 257, patches=256, patch_dim=14 * 14 * 3, embed_dim=1024)
    oracle = count_macs(ops)
    assert abs(oracle / 162e9 - 1) <= 0.15
    assert encoder_flops(H14_IMG, 257, patch_tokens=256) == oracle


@pytest.mark.parametrize("preset", sorted(FLOPS_PRESETS))
def test_encoder_flops_matches_oracle_on_presets(preset):
    img, txt = FLOPS_PRESETS[preset]
    n = (224 // img.patch_size) ** 2
    ops = vit_matmul_shapes(img.layers, img.width, img.heads, img.mlp_width, n + 1, patches=n,
                            patch_dim=img.patch_size ** 2 * 3, embed_dim=img.embed_dim)
    assert encoder_flops(img, n + 1, patch_tokens=n) == count_macs(ops)
    ops = vit_matmul_shapes(txt.layers, txt.width, txt.heads, txt.mlp_width, 32, embed_dim=txt.embed_dim)
    assert encoder_flops(txt, 32) == count_macs(ops)


def test_h14_per_sample_flops():
    base = training_flops_per_sample(H14_IMG, H14_TXT, 224, 0.0, 32)
    assert abs(base / 177.0e9 - 1) <= 0.15
    r30 = training_flops_per_sample(H14_IMG, H14_TXT, 224, 0.3, 32) / base
    assert abs(r30 / (135.9 / 177.0) - 1) <= 0.10
    r336 = training_flops_per_sample(H14_IMG, H14_TXT, 336, 0.4, 32) / base
    assert abs(r336 / (237.8 / 177.0) - 1) <= 0.10
    assert training_flops_per_sample(H14_IMG, H14_TXT, 224, 0.0, 32, backward_multiplier=3) == 3 * base


def test_flops_monotone_in_side_and_ratio():
    sides = [f for f in (training_flops_per_sample(H14_IMG, H14_TXT, s, 0.3, 32) for s in (70, 84, 112, 224, 336))]
    assert all(a < b for a, b in zip(sides, sides[1:]))
    ratios = [training_flops_per_sample(H14_IMG, H14_TXT, 224, r, 32) for r in (0.0, 0.1, 0.3, 0.5, 0.75, 0.9)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def _plan(stages):
    return TrainPlan(H14_IMG, H14_TXT, stages)


def _stage(name, side, r, samples, text=32, role="finetune"):
    return StageConfig(name, side, MaskSpec("random" if r else "none", r), text, samples, batch_size=1,
                       role=role)


def test_plan_compute_blended_progressive():
    plan = _plan([_stage("ft224", 224, 0.3, 512_000_000), _stage("ft336", 336, 0.4, 128_000_000)])
    rep = plan_compute(plan)
    base = training_flops_per_sample(H14_IMG, H14_TXT, 224, 0.0, 32)
    assert rep.total_flops == sum(s.flops for s in rep.stages)
    assert abs(rep.blended_flops_per_sample() / base / (156.3 / 177.0) - 1) <= 0.10


def test_plan_compute_scaling_and_additivity():
    a = plan_compute(_plan([_stage("pre", 84, 0.0, 2_560_000_000, 8, "pretrain")]))
    b = plan_compute(_plan([_stage("pre", 84, 0.0, 12_800_000_000, 8, "pretrain")]))
    assert b.total_flops == 5 * a.total_flops
    ft = plan_compute(_plan([_stage("ft", 224, 0.0, 128_000_000)]))
    both = plan_compute(_plan([_stage("pre", 84, 0.0, 2_560_000_000, 8, "pretrain"), _stage("ft", 224, 0.0, 128_000_000)]))
    assert (a + ft).total_flops == both.total_flops
    assert CostReport().total_flops == 0 and CostReport().blended_flops_per_sample() == 0.0


def test_plan_compute_hours_and_dollars():
    rep = plan_compute(_plan([_stage("ft", 224, 0.0, 1000)]), throughput=1e12, rate=GCP_A100)
    assert rep.gpu_hours == pytest.approx(rep.total_flops / 1e12 / 3600)
    assert rep.dollars == dollar_cost(rep.gpu_hours, GCP_A100)
    assert "est. cost" in rep.render()
    with pytest.raises(CostError):
        plan_compute(_plan([_stage("ft", 224, 0.0, 1000)]), throughput=0)


@pytest.mark.parametrize("hours, display", [(5920, "$9,324"), (7776, "$12,247"), (232_448, "$366,106"), (0, "$0")])
def test_dollar_cost_examples(hours, display):
    assert format_dollars(dollar_cost(hours, GCP_A100)) == display


def test_dollar_cost_exact_and_rounding():
    assert dollar_cost(7776, 1.575) == Decimal("12247.2")
    assert round_dollars(Decimal("0.5")) == 1 and round_dollars(Decimal("2.5")) == 3
    with pytest.raises(CostError):
        dollar_cost(-1, GCP_A100)
    with pytest.raises(CostError):
        RateCard(0.0)


@given(st.decimals(0, 10**6, places=3), st.decimals(0, 10**6, places=3))
def test_dollar_cost_linear(a, b):
    assert dollar_cost(a + b, GCP_A100) == dollar_cost(a, GCP_A100) + dollar_cost(b, GCP_A100)


def test_comparison_report_examples():
    t = cost_comparison_table()
    r = t.ratio("OpenCLIP G/14 LAION-2B")
    assert round(r, 2) == 39.26 and format_ratio(r) == "≈39×"
    assert "≈39×" in t.render()
    single = comparison_report([ComparisonRow("only", 10.0)])
    assert single.ratios() == {}
    pair = comparison_report([ComparisonRow("a", 10.0), ComparisonRow("b", 10.0)])
    assert list(pair.ratios().values()) == [1.0]
    with pytest.raises(CostError):
        comparison_report([])


def test_comparison_printed_costs_and_other_rate():
    printed = cost_comparison_table(recompute=False)
    row = printed._row("OpenCLIP H/14 LAION-2B")
    assert row.dollars == Decimal(247_864)
    assert float(row.dollars) / row.gpu_hours == pytest.approx(1.144, abs=1e-3)
    assert format_dollars(dollar_cost(5920, LAMBDA_A100)) == "$8,880"
