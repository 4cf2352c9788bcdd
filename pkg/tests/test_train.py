import math

import numpy as np
import pytest

import clca.autodiff as ad_pkg
from clca import autodiff as ad
from clca.autodiff import Parameter
from clca.data import Dataset, DatasetSpec, generate
from clca.model import ClcaViT, ModelConfig, gradcheck_config
from clca.train import (
    AdamWHyper,
    TrainConfig,
    adamw_step,
    decays,
    evaluate,
    evaluate_model,
    grad_check,
    gradient_maxima,
    lr_at,
    read_gradtrace,
    read_metrics,
    train,
)

MICRO = ModelConfig(image_size=16, patch_size=4, dim=8, depth=3, heads=2, num_classes=4,
                    reduction_layers=(1,), keep_rate=0.5)
MICRO_DATA = DatasetSpec(num_macro=2, classes_per_macro=2, samples_per_class=10, image_side=16, patch_size=4)
MICRO_TRAIN = TrainConfig(epochs=2, batch_size=8, eval_batch_size=5, warmup_epochs=1, base_lr=1e-3)


@pytest.fixture(scope="module")
def micro_data():
    return generate(MICRO_DATA)


def _without_seconds(rows):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]


# ---------------------------------------------------------------------------
# optimizer

def test_zero_lr_leaves_parameters_unchanged():
    p = {"w": Parameter("w", np.array([[1.0, -2.0]]), np.float64)}
    adamw_step(p, {"w": np.array([[0.3, 0.1]])}, {}, AdamWHyper(lr=0.0), 1)
    np.testing.assert_array_equal(p["w"].data, [[1.0, -2.0]])


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_single_step_closed_form(g):
    lr, (b1, b2), eps = 0.01, (0.9, 0.999), 1e-8
    p = {"w": Parameter("w", np.array([[2.0]]), np.float64)}
    adamw_step(p, {"w": np.array([[g]])}, {}, AdamWHyper(lr, (b1, b2), eps, 0.0), 1)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert p["w"].data[0, 0] == pytest.approx(2.0 - lr * m_hat / (math.sqrt(v_hat) + eps), abs=1e-15)


def test_zero_grad_is_pure_shrink():
    p = {"w": Parameter("w", np.array([[2.0, -4.0]]), np.float64)}
    adamw_step(p, {"w": np.zeros((1, 2))}, {}, AdamWHyper(0.1, weight_decay=0.05), 1)
    np.testing.assert_allclose(p["w"].data, np.array([[2.0, -4.0]]) * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_non_finite_gradient_skips_step():
    p = {"w": Parameter("w", np.array([[1.0]]), np.float64)}
    state = {}
    assert not adamw_step(p, {"w": np.array([[np.nan]])}, state, AdamWHyper(0.1), 1)
    assert p["w"].data[0, 0] == 1.0 and not state


def test_decay_exclusion_audit():
    model = ClcaViT(ModelConfig(image_size=16, patch_size=4, dim=8, depth=3, heads=2, num_classes=4,
                                reduction_layers=(1,)))
    decayed = {n for n, prm in model.params.items() if decays(n, prm.shape)}
    for name in model.params:
        leaf = name.rsplit(".", 1)[-1]
        exempt = (leaf in ("bias", "q_bias", "v_bias") or ".norm" in name or name.startswith("norm.")
                  or ".bn" in name or name in ("cls_token", "clr_token", "pos_embed"))
        assert (name in decayed) == (not exempt), name
    assert "blocks.1.attn.qkv.weight" in decayed and "head.dw.weight" in decayed


def test_decay_is_applied_only_to_matrices():
    params = {
        "blocks.1.norm1.weight": Parameter("n", np.ones(3), np.float64),
        "m": Parameter("m", np.ones((2, 2)), np.float64),
    }
    grads = {k: np.zeros_like(v.data) for k, v in params.items()}
    adamw_step(params, grads, {}, AdamWHyper(0.5, weight_decay=0.1), 1)
    assert (params["blocks.1.norm1.weight"].data == 1).all()
    assert np.allclose(params["m"].data, 0.95)


def test_step_index_starts_at_one():
    with pytest.raises(ValueError):
        adamw_step({}, {}, {}, AdamWHyper(0.1), 0)


def test_lr_schedule_shape():
    lrs = [lr_at(s, 100, 10, 1e-3, 1e-6) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-4) and lrs[9] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lr_at(100, 100, 10, 1e-3, 1e-6) == pytest.approx(1e-6)


# ---------------------------------------------------------------------------
# training loop

def test_training_is_deterministic(tmp_path, micro_data):
    a = train(MICRO, MICRO_TRAIN, micro_data, tmp_path / "a")
    b = train(MICRO, MICRO_TRAIN, micro_data, tmp_path / "b")
    assert _without_seconds(read_metrics(a.metrics_csv)) == _without_seconds(read_metrics(b.metrics_csv))
    assert a.gradtrace_csv.read_bytes() == b.gradtrace_csv.read_bytes()
    assert a.last_checkpoint.read_bytes() == b.last_checkpoint.read_bytes()


def test_metrics_and_gradtrace_layout(tmp_path, micro_data):
    res = train(MICRO, MICRO_TRAIN, micro_data, tmp_path)
    rows = read_metrics(res.metrics_csv)
    assert list(rows[0]) == ["epoch", "split", "loss", "top1", "seconds", "macs"]
    assert [(r["epoch"], r["split"]) for r in rows] == [("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")]
    assert all(0 <= float(r["top1"]) <= 1 for r in rows)
    trace = read_gradtrace(res.gradtrace_csv)
    steps_per_epoch = math.ceil(len(micro_data[0]) / MICRO_TRAIN.batch_size)
    overall = [r for r in trace if r["layer"] == "all"]
    assert len(overall) == MICRO_TRAIN.epochs * steps_per_epoch
    assert [int(r["step"]) for r in overall] == list(range(1, len(overall) + 1))
    assert all(np.isfinite(float(r["max_abs_grad"])) for r in trace)
    per_step = {}
    for r in trace:
        per_step.setdefault(r["step"], []).append(float(r["max_abs_grad"]))
    for r in overall:
        assert float(r["max_abs_grad"]) == max(per_step[r["step"]])


def test_evaluate_reproduces_final_val_row(tmp_path, micro_data):
    res = train(MICRO, MICRO_TRAIN, micro_data, tmp_path)
    final = [r for r in read_metrics(res.metrics_csv) if r["split"] == "val"][-1]
    row = evaluate(res.last_checkpoint, micro_data[1])
    assert repr(row.loss) == final["loss"] and repr(row.top1) == final["top1"]
    assert row.epoch == int(final["epoch"]) and row.macs == int(final["macs"])


def test_resume_matches_uninterrupted_run(tmp_path, micro_data):
    full = train(MICRO, MICRO_TRAIN, micro_data, tmp_path / "full")
    part = tmp_path / "part"
    train(MICRO, MICRO_TRAIN, micro_data, part, until_epoch=1)
    assert len(read_metrics(part / "metrics.csv")) == 2
    resumed = train(MICRO, MICRO_TRAIN, micro_data, part, resume=True)
    assert _without_seconds(read_metrics(resumed.metrics_csv)) == _without_seconds(read_metrics(full.metrics_csv))
    assert resumed.gradtrace_csv.read_bytes() == full.gradtrace_csv.read_bytes()
    assert resumed.last_checkpoint.read_bytes() == full.last_checkpoint.read_bytes()


def test_side_mismatch_rejected(tmp_path, micro_data):
    with pytest.raises(ValueError, match="side"):
        train(MICRO.replace(image_size=32), MICRO_TRAIN, micro_data, tmp_path)


def test_empty_val_split_rejected(tmp_path, micro_data):
    tr, va = micro_data
    empty = Dataset(va.images[:0], va.labels[:0], va.label_names)
    with pytest.raises(ValueError, match="non-empty"):
        train(MICRO, MICRO_TRAIN, (tr, empty), tmp_path)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_aggregation_head_needs_batches_of_two(tmp_path, micro_data):
    with pytest.raises(ValueError, match="batch"):
        train(MICRO, TrainConfig(epochs=1, batch_size=1), micro_data, tmp_path)


def test_single_sample_eval_mode(micro_data):
    model = ClcaViT(MICRO)
    loss, top1 = evaluate_model(model, micro_data[1], batch_size=1)
    assert np.isfinite(loss) and 0 <= top1 <= 1


def test_fresh_model_is_at_chance():
    cfg = ModelConfig(image_size=32, patch_size=8, dim=16, depth=2, heads=2, num_classes=32,
                      reduction_layers=(1,), keep_rate=0.5)
    _, val = generate(DatasetSpec(samples_per_class=10, image_side=32))
    model = ClcaViT(cfg, seed=1)
    rng = np.random.default_rng(1)
    for prm in model.params.values():
        prm.data = (prm.data + 0.05 * rng.standard_normal(prm.shape)).astype(np.float32)
    loss, top1 = evaluate_model(model, val, 16)
    n, p = len(val), 1 / 32
    assert abs(top1 - p) <= 3 * math.sqrt(p * (1 - p) / n) + 1 / n


def test_first_batch_loss_near_log_classes(micro_data):
    model = ClcaViT(MICRO)
    images, labels = micro_data[0].images[:8], micro_data[0].labels[:8].astype(np.int64)
    logits, _ = model(images, training=True)
    loss = ad.cross_entropy(logits, labels).item()
    assert abs(loss / math.log(MICRO.num_classes) - 1) < 0.10


def test_gradient_maxima_groups_by_layer():
    out = gradient_maxima({
        "blocks.2.attn.qkv.weight": np.array([1.0, -3.0]),
        "blocks.2.mlp.fc1.bias": np.array([2.0]),
        "pos_embed": np.array([-0.5]),
        "head.pw.weight": np.array([0.25]),
    })
    assert out == {"blocks.2": 3.0, "tokens": 0.5, "head": 0.25, "all": 3.0}


# ---------------------------------------------------------------------------
# finite-difference verification

def test_linear_probe_gradients_are_exact():
    cfg = gradcheck_config(clca=False)
    report = grad_check(cfg, only=("head.",), max_entries=None)
    assert report.passed and report.max_rel_error < 1e-6


def test_gradcheck_passes_on_sampled_coordinates():
    report = grad_check(gradcheck_config(), max_entries=3)
    assert report.passed, report.format()
    assert report.max_rel_error < 1e-3


def test_corrupted_backward_rule_is_caught(monkeypatch):
    real = ad_pkg.gelu

    def gelu_with_identity_grad(x):
        y = real(x)
        return ad.add(ad.detach(ad.sub(y, x)), x)

    monkeypatch.setattr(ad_pkg, "gelu", gelu_with_identity_grad)
    report = grad_check(gradcheck_config(), only=("blocks.1.mlp.fc1.weight",), max_entries=4)
    assert not report.passed
    assert "FAIL" in report.format()
