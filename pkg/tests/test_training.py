import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clipa import autodiff as ad
from clipa import models
from clipa.autodiff import Tensor
from clipa.data import SyntheticSource, tokenize_batch, toy_vocab
from clipa.masking import MaskSpec
from clipa.models import ClipModel, encode_images, encode_texts, toy_preset
from clipa.training import (AdamWState, ContractError, MissingBaselineError, StageConfig,
                            TrainingError, TrainPlan, adamw_step, clip_grad_norm, cosine_lr, decay_mask_for,
                            infonce_loss, mask_ratio_sweep, run_plan, train_stage)

from oracles import softmax_ce_2x2

VOCAB = toy_vocab()


def unit_rows(x):
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- loss ---------------------------------------------------------------------------------

@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_infonce_identical_embeddings_is_log_b(b, f64):
    e = np.tile(unit_rows([[1.0, 2.0, 2.0]]), (b, 1))
    for scale in (1.0, 14.3, 100.0):
        assert abs(infonce_loss(Tensor(e), Tensor(e), scale).item() - math.log(b)) < 1e-6


def test_infonce_hand_computed_2x2(f64):
    e = np.eye(2)
    loss = infonce_loss(Tensor(e), Tensor(e), 10.0).item()
    assert abs(loss - softmax_ce_2x2(10.0)) < 1e-12
    assert abs(loss - 4.54e-5) < 1e-7


def test_infonce_contract_violation():
    with pytest.raises(ContractError):
        infonce_loss(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]]), 1.0)
    with pytest.raises(ContractError):
        infonce_loss(Tensor(np.eye(2)), Tensor(np.eye(3)[:2]), 1.0)


@given(st.integers(2, 10), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_infonce_permutation_equivariant_and_nonnegative(b, e, seed):
    with ad.precision(np.float64):
        rs = np.random.default_rng(seed)
        img, txt = unit_rows(rs.normal(size=(b, e))), unit_rows(rs.normal(size=(b, e)))
        perm = rs.permutation(b)
        base = infonce_loss(Tensor(img), Tensor(txt), 5.0).item()
        assert base >= 0
        assert abs(infonce_loss(Tensor(img[perm]), Tensor(txt[perm]), 5.0).item() - base) < 1e-6


# -- optimizer and schedule -----------------------------------------------------------------

def test_adamw_zero_grad_no_decay_unchanged(f64):
    p = Tensor([1.0, -2.0], requires_grad=True)
    adamw_step([p], [np.zeros(2)], AdamWState(), lr=0.1, weight_decay=0.0)
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_first_step_closed_form(f64):
    p = Tensor([0.0], requires_grad=True)
    adamw_step([p], [np.array([1.0])], AdamWState(), lr=0.1, eps=1e-8, weight_decay=0.0)
    assert abs(p.data[0] - (-0.1 / (1 + 1e-8))) < 1e-15


def test_adamw_pure_decay(f64):
    p = Tensor([2.0, -4.0], requires_grad=True)
    adamw_step([p], [np.zeros(2)], AdamWState(), lr=0.1, weight_decay=0.2)
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.2), atol=1e-15)


def test_adamw_decay_mask_and_nonfinite(f64):
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    adamw_step([a, b], [np.zeros(1), np.zeros(1)], AdamWState(), lr=0.5, weight_decay=0.5,
               decay_mask=[True, False])
    assert a.data[0] == 0.75 and b.data[0] == 1.0
    with pytest.raises(TrainingError, match="non-finite"):
        adamw_step([a], [np.array([np.nan])], AdamWState(), lr=0.1)


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 10, 1.0, 0.1) == 0.0
    assert cosine_lr(10, 100, 10, 1.0, 0.1) == 1.0
    assert cosine_lr(5, 100, 10, 1.0, 0.1) == 0.5
    mid = cosine_lr(55, 100, 10, 1.0, 0.1)
    assert abs(mid - (0.1 + 0.9 / 2 * (1 + math.cos(math.pi / 2)))) < 1e-12
    assert abs(cosine_lr(100, 100, 10, 1.0, 0.1) - 0.1) < 1e-12
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 10, 1.0, 0.1)


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == 5.0
    assert abs(math.hypot(g[0][0], g[1][0]) - 1.0) < 1e-6


def test_decay_mask_skips_vectors_and_embeddings():
    model = ClipModel(*toy_preset("toy-S", len(VOCAB), image_size=16))
    mask = dict(zip(model.params, decay_mask_for(model)))
    assert mask["image.blocks.0.wq"] and mask["image.proj"]
    assert not mask["image.pos"] and not mask["text.tok_emb"] and not mask["logit_scale"]
    assert not mask["image.blocks.0.bq"] and not mask["image.ln_g"]


# -- plans ------------------------------------------------------------------------------------

def test_stage_and_plan_validation():
    with pytest.raises(ValueError):
        StageConfig("s", 16, samples_seen=8, batch_size=16)
    img, txt = toy_preset("toy-S", len(VOCAB), image_size=16)
    with pytest.raises(ValueError):
        TrainPlan(img, txt, [])
    with pytest.raises(ValueError):
        TrainPlan(img, txt, [StageConfig("s", 20)])  # not divisible by patch 8
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        TrainPlan(img, txt, [StageConfig("a", 32), StageConfig("b", 16)])
    assert any("decrease" in str(x.message) for x in w)


def _tiny_plan(stages, preset="toy-S", side=16, seed=0):
    img, txt = toy_preset(preset, len(VOCAB), image_size=side)
    return TrainPlan(img, txt, stages, seed)


def test_ratio_zero_stage_matches_plain_loop(f64):
    stage = StageConfig("ft", 16, MaskSpec("none", 0.0), text_len=8, samples_seen=4, batch_size=2,
                        peak_lr=1e-2, warmup_samples=2, lr_floor=1e-3)
    plan = _tiny_plan([stage])
    src = SyntheticSource(0, 4)
    model, _ = run_plan(plan, src)

    ref = plan.build_model()
    names = list(ref.params)
    decay = decay_mask_for(ref)
    state = AdamWState()
    stream = src(16)
    for step in range(stage.steps):
        batch = [next(stream) for _ in range(2)]
        ids, real = tokenize_batch([c for _, c in batch], VOCAB, 8)
        loss = infonce_loss(encode_images(ref, np.stack([i for i, _ in batch])),
                            encode_texts(ref, ids, real), ref.logit_scale())
        params = [ref.params[n] for n in names]
        for p in params:
            p.grad = None
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        clip_grad_norm(grads, stage.grad_clip)
        lr = cosine_lr(step + 1, stage.steps, stage.warmup_steps, stage.peak_lr, stage.lr_floor)
        adamw_step(params, grads, state, lr, stage.betas, weight_decay=stage.weight_decay, decay_mask=decay)
    for n in names:
        assert model.params[n].data.tobytes() == ref.params[n].data.tobytes(), n


def test_loss_decreases_below_log_b():
    stage = StageConfig("pre", 16, MaskSpec("random", 0.5, 0), samples_seen=200 * 16, batch_size=16,
                        peak_lr=3e-3, warmup_samples=160, lr_floor=1e-4, weight_decay=0.05)
    _, reports = run_plan(_tiny_plan([stage]), SyntheticSource(0, 1024))
    assert reports[0].steps == 200
    assert reports[0].mean_loss_tail < math.log(16)


def test_masked_flops_per_step_at_least_20_percent_lower():
    def fps(r):
        st = StageConfig("s", 32, MaskSpec("random" if r else "none", r, 0), samples_seen=16, batch_size=16)
        _, reps = run_plan(_tiny_plan([st], "toy-B", 32), SyntheticSource(0, 32))
        return reps[0].flops_per_step

    full, masked = fps(0.0), fps(0.3)
    assert masked <= 0.8 * full
    assert fps(0.5) <= masked  # non-increasing in ratio


def test_two_stage_plan_resizes_once(monkeypatch):
    calls = []
    orig = models.resize_pos_embed

    def spy(*a, **k):
        calls.append(a[1])
        return orig(*a, **k)

    monkeypatch.setattr(models, "resize_pos_embed", spy)
    stages = [StageConfig("lo", 32, samples_seen=4, batch_size=2), StageConfig("hi", 64, samples_seen=4, batch_size=2)]
    model, reports = run_plan(_tiny_plan(stages, side=32), SyntheticSource(0, 8))
    assert calls == [8]
    assert [r.resized_pos_embed for r in reports] == [False, True]
    assert model.image_side == 64


def test_single_stage_plan_equals_train_stage():
    stage = StageConfig("s", 16, MaskSpec("random", 0.5, 2), samples_seen=8, batch_size=4)
    plan = _tiny_plan([stage])
    a, _ = run_plan(plan, SyntheticSource(0, 8))
    b = plan.build_model()
    train_stage(b, stage, SyntheticSource(0, 8)(16))
    assert a.digest() == b.digest()


def test_run_plan_outputs_and_determinism(tmp_path):
    stages = [StageConfig("pre", 16, MaskSpec("random", 0.5, 0), samples_seen=8, batch_size=4, role="pretrain"),
              StageConfig("ft", 24, samples_seen=8, batch_size=4)]
    plan = _tiny_plan(stages)
    for run in ("a", "b"):
        run_plan(plan, SyntheticSource(0, 16), out_dir=tmp_path / run)
    logs = [_metric_lines(tmp_path / r / "logs" / "metrics.jsonl") for r in ("a", "b")]
    assert logs[0] == logs[1] and len(logs[0]) == 4
    assert set(logs[0][0]) == {"step", "stage", "loss", "lr", "flops"}
    for name in ("pre.ckpt", "ft.ckpt", "final.ckpt"):
        assert (tmp_path / "a" / "checkpoints" / name).read_bytes() == (tmp_path / "b" / "checkpoints" / name).read_bytes()
    assert (tmp_path / "a" / "reports" / "stages.json").exists()


def _metric_lines(path):
    import json
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rec.pop("wall_ms")
        out.append(rec)
    return out


def test_nonfinite_loss_aborts_with_checkpoint(tmp_path):
    stage = StageConfig("s", 16, samples_seen=8, batch_size=4)
    plan = _tiny_plan([stage])
    model = plan.build_model()
    model.params["image.proj"].data[...] = np.nan
    with pytest.raises(TrainingError) as exc:
        train_stage(model, stage, SyntheticSource(0, 8)(16), checkpoint_dir=tmp_path)
    assert exc.value.checkpoint is not None and exc.value.checkpoint.exists()


def test_stage_rejects_wrong_resolution():
    stage = StageConfig("s", 16, samples_seen=4, batch_size=4)
    model = _tiny_plan([stage]).build_model()
    with pytest.raises(ContractError):
        train_stage(model, stage, SyntheticSource(0, 8)(24))


# -- sweep ------------------------------------------------------------------------------------

def test_mask_ratio_sweep_grid():
    stages = [StageConfig("pre", 16, MaskSpec("random", 0.5, 0), samples_seen=8, batch_size=4, role="pretrain"),
              StageConfig("ft", 16, samples_seen=8, batch_size=4)]
    plan = _tiny_plan(stages)
    vocab_n = len(VOCAB)
    sizes = {n: toy_preset(n, vocab_n, image_size=16) for n in ("toy-S", "toy-B")}
    held = SyntheticSource(1, 32).labeled(16)
    from clipa.evaluation import evaluate

    table = mask_ratio_sweep(sizes, [0.0, 0.5, 0.75], plan, SyntheticSource(0, 16),
                                  lambda m: evaluate(m, held, "classify").top1)
    d = table.to_dict()
    assert len(d["rows"]) == 6
    assert all(r["drop"] == 0.0 for r in d["rows"] if r["ratio"] == 0.0)
    assert "toy-S" in table.render()
    again = mask_ratio_sweep(sizes, [0.0, 0.5, 0.75], plan, SyntheticSource(0, 16),
                                  lambda m: evaluate(m, held, "classify").top1)
    assert again.to_dict() == d
    with pytest.raises(MissingBaselineError):
        mask_ratio_sweep(sizes, [0.5], plan, SyntheticSource(0, 16), lambda m: 0.0)
