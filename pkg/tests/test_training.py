import struct

import numpy as np
import pytest

from masktune.masking import sparsity
from masktune.model import ModelConfig, build_model, pretrain_surrogate
from masktune.optim import AdamState, adam_step, cosine_lr
from masktune.regularizer import ConfigError, kl_gradient_field, purity
from masktune.training import (
    DegenerateSelectionError,
    FeatureFormatError,
    RunConfig,
    TuningError,
    apply_artifact,
    delta_report,
    evaluate,
    evaluate_base_new,
    feature_prototypes,
    generate_synthetic_task,
    harmonic_mean,
    load_feature_task,
    mask_gradients,
    read_feature_file,
    run_mask_tuning,
    select_layers,
    summarize_delta,
    write_feature_file,
    write_metrics,
)


@pytest.fixture(scope="module")
def setup():
    base, task = generate_synthetic_task(seed=0, base_per_class=8, test_per_class=10, shots=4)
    model = pretrain_surrogate(ModelConfig(pretrain_epochs=2), base.prototypes, base.tokens, base.labels)
    return model, task


def quick(**kw):
    return RunConfig(**{"epochs": 2, "batch_size": 16, **kw})


# -- tasks ---------------------------------------------------------------------------

def test_shots_respected():
    for n in (1, 2, 4, 8, 16):
        _, task = generate_synthetic_task(seed=1, shots=n, base_per_class=2)
        assert np.array_equal(np.bincount(task.train_y), np.full(task.num_classes, n))


def test_train_test_disjoint():
    _, task = generate_synthetic_task(seed=2, base_per_class=2)
    train = {x.tobytes() for x in task.train_x}
    assert not any(x.tobytes() in train for x in task.test_x)


def test_generator_deterministic():
    a = generate_synthetic_task(seed=7, base_per_class=3)
    b = generate_synthetic_task(seed=7, base_per_class=3)
    assert np.array_equal(a[0].tokens, b[0].tokens)
    assert np.array_equal(a[1].train_x, b[1].train_x)
    assert np.array_equal(a[1].test_y, b[1].test_y)
    c = generate_synthetic_task(seed=8, base_per_class=3)
    assert not np.array_equal(a[1].train_x, c[1].train_x)


def test_generator_rejects_bad_config():
    with pytest.raises(ConfigError):
        generate_synthetic_task(classes=1)
    with pytest.raises(ConfigError):
        generate_synthetic_task(shots=0)
    with pytest.raises(ConfigError):
        generate_synthetic_task(classes=50, base_classes=40)


def test_base_new_split_halves():
    _, task = generate_synthetic_task(seed=0, base_per_class=2)
    assert list(task.base_classes) == [0, 1, 2, 3, 4]
    assert list(task.new_classes) == [5, 6, 7, 8, 9]
    sub = task.subset(task.new_classes)
    assert set(sub.train_y) == set(range(5))
    assert np.array_equal(sub.class_ids, task.class_ids[5:])


# -- feature files ----------------------------------------------------------------------

def test_feature_roundtrip(tmp_path):
    _, task = generate_synthetic_task(seed=3, base_per_class=2)
    path = tmp_path / "train.rmtf"
    write_feature_file(path, task.train_x, task.train_y, task.num_classes)
    x, y, C = read_feature_file(path)
    assert C == task.num_classes
    assert np.array_equal(x.reshape(task.train_x.shape), task.train_x)
    assert np.array_equal(y, task.train_y)


def test_hand_built_fixture(tmp_path):
    # bytes assembled by hand, independent of the writer
    rows = [(0, [1, 0, 0, 0]), (2, [0, 0, 3, 4]), (1, [0, 2, 0, 0]), (2, [0, 0, 0, 1])]
    raw = b"RMTF" + struct.pack("<IIII", 1, len(rows), 4, 3)
    for label, vals in rows:
        raw += struct.pack("<I4f", label, *vals)
    path = tmp_path / "hand.rmtf"
    path.write_bytes(raw)
    x, y, C = read_feature_file(path)
    assert C == 3 and list(y) == [0, 2, 1, 2]
    assert x[1].tolist() == [0, 0, 3, 4]
    task = load_feature_task(path, path)
    np.testing.assert_allclose(task.train_x[1, 0], [0, 0, 0.6, 0.8], atol=1e-15)
    assert task.num_classes == 3 and task.shots == 1


def test_truncated_feature_file(tmp_path):
    path = tmp_path / "t.rmtf"
    write_feature_file(path, np.ones((3, 4)), np.array([0, 1, 2]))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FeatureFormatError, match="byte offset"):
        read_feature_file(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FeatureFormatError, match="truncated header"):
        read_feature_file(path)


def test_feature_label_range_and_magic(tmp_path):
    path = tmp_path / "b.rmtf"
    path.write_bytes(b"RMTF" + struct.pack("<IIII", 1, 1, 1, 2) + struct.pack("<If", 5, 1.0))
    with pytest.raises(FeatureFormatError, match="byte offset 20"):
        read_feature_file(path)
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(FeatureFormatError, match="magic"):
        read_feature_file(path)


def test_feature_task_tunes_projection_head(tmp_path):
    rng = np.random.default_rng(0)
    means = rng.normal(size=(3, 8))
    y = np.repeat(np.arange(3), 6)
    x = means[y] + 0.3 * rng.normal(size=(18, 8))
    write_feature_file(tmp_path / "tr.rmtf", x, y)
    write_feature_file(tmp_path / "te.rmtf", x, y)
    task = load_feature_task(tmp_path / "tr.rmtf", tmp_path / "te.rmtf")
    model = build_model(ModelConfig(blocks=0, d_in=8, out_dim=8), feature_prototypes(task))
    report = run_mask_tuning(model, task, quick(policy="pmt"))
    assert [r.name for r in report.artifact.layers] == ["proj"]


# -- layer selection / delta --------------------------------------------------------------

def test_policy_layer_counts(setup):
    model, task = setup
    amt = select_layers(model, "amt")
    mmt = select_layers(model, "mmt")
    pmt = select_layers(model, "pmt")
    assert len(amt) == 8 and len(mmt) == 4 and len(pmt) == 13
    size = lambda names: sum(model.layer(n).theta.size for n in names)
    assert size(pmt) > size(amt)
    assert set(amt) | set(mmt) == set(pmt) - {"proj"}
    dmt = select_layers(model, "dmt", task, quick(policy="dmt"))
    assert set(dmt) <= set(pmt)


def test_dmt_degenerate(setup):
    model, task = setup
    with pytest.raises(DegenerateSelectionError):
        select_layers(model, "dmt", task, quick(policy="dmt", lr=0.0))


def test_unknown_policy():
    with pytest.raises(ConfigError):
        RunConfig(policy="xmt")


def test_delta_arithmetic():
    per_layer, groups = summarize_delta([{"blocks.0.attn.q": np.full((3, 3), -0.5)}], 0.1)
    assert per_layer["blocks.0.attn.q"] == pytest.approx(0.05, abs=1e-15)
    assert groups == {"mhsa": pytest.approx(0.05)}


def test_delta_identical_layers():
    g = np.random.default_rng(0).normal(size=(4, 4))
    per_layer, _ = summarize_delta([{"a.attn.q": g, "b.attn.q": g.copy()}] * 3, 0.2)
    assert per_layer["a.attn.q"] == per_layer["b.attn.q"]


def test_delta_report_groups_and_masks_untouched(setup):
    model, task = setup
    per_layer, groups = delta_report(model, task, quick())
    assert {"mhsa", "mlp", "head"} == set(groups)
    assert len(per_layer) == 13
    assert all(not l.enabled for l in model.masked_layers())


# -- optimizer ---------------------------------------------------------------------------------

def test_adam_first_step():
    for g in (3.0, -0.02, 1e-3):
        p = np.array([1.0])
        adam_step(p, np.array([g]), AdamState.zeros_like(p), 0.1)
        assert p[0] == pytest.approx(1.0 - 0.1 * np.sign(g), abs=1e-5)


def test_adam_zero_gradient():
    p = np.array([0.3, -2.0])
    st = AdamState.zeros_like(p)
    for _ in range(50):
        adam_step(p, np.zeros(2), st, 0.1)
    assert p.tolist() == [0.3, -2.0]


def test_adam_quadratic():
    x = np.array([1.0])
    st = AdamState.zeros_like(x)
    for _ in range(200):
        adam_step(x, 2 * x, st, 0.1)
    assert abs(x[0]) < 0.02


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-16)


# -- evaluation ------------------------------------------------------------------------------

def test_harmonic_mean():
    assert harmonic_mean(80, 70) == pytest.approx(74.67, abs=0.005)
    assert harmonic_mean(0, 70) == 0.0


def test_evaluate_perfect_and_empty(setup, monkeypatch):
    model, task = setup
    import masktune.training as tr
    monkeypatch.setattr(tr, "predict", lambda m, x, c: task.test_y.copy())
    acc, per_class = evaluate(model, task.test_x, task.test_y, task.class_ids)
    assert acc == 100.0 and np.all(per_class == 100.0)
    with pytest.raises(ConfigError):
        evaluate(model, task.test_x[:0], task.test_y[:0], task.class_ids)


def test_base_new_eval(setup):
    model, task = setup
    b, n, h = evaluate_base_new(model, task)
    assert h == pytest.approx(harmonic_mean(b, n))


# -- tuning loop --------------------------------------------------------------------------

def test_run_validation():
    with pytest.raises(ConfigError):
        RunConfig(epochs=0)
    with pytest.raises(ConfigError):
        RunConfig(leak=-0.1)
    with pytest.raises(ConfigError):
        RunConfig(batch_size=0)


def test_zero_lr_keeps_masks(setup):
    model, task = setup
    report = run_mask_tuning(model, task, quick(epochs=1, lr=0.0))
    assert report.sparsity == 0.0
    assert report.accuracy == report.zero_shot_accuracy


def _trajectory(model, task, cfg):
    masks = []
    run_mask_tuning(model, task, cfg,
                    on_step=lambda s, m: masks.append(np.concatenate([l.mask.ravel() for l in m.enabled_layers()])))
    return np.array(masks)


def test_leak_zero_matches_plain(setup):
    model, task = setup
    plain = _trajectory(model, task, quick())
    reg = _trajectory(model, task, quick(regularized=True, leak=0.0))
    assert np.abs(plain - reg).max() <= 1e-12


def test_regularized_differs_with_leak(setup):
    model, task = setup
    assert not np.array_equal(_trajectory(model, task, quick()),
                              _trajectory(model, task, quick(regularized=True, leak=1.0)))


def test_step_zero_kl_and_purity(setup):
    model, task = setup
    apply_artifact(model, run_mask_tuning(model, task, quick(epochs=1, lr=0.0)).artifact)
    from masktune.model import zero_shot_reference
    x, y = task.train_x[:16], task.train_y[:16]
    ref = zero_shot_reference(model, x, task.class_ids)
    g_kl = kl_gradient_field(model, x, ref, task.class_ids)
    _, _, g_ce, g_kl2 = mask_gradients(model, x, y, task.class_ids, ref)
    for name in g_kl:
        assert np.all(g_kl[name] == 0.0) and np.all(g_kl2[name] == 0.0)
        assert np.all(purity(g_ce[name], g_kl[name]) == 1.0)


def test_sparsity_recount_and_artifact(setup):
    model, task = setup
    report = run_mask_tuning(model, task, quick(epochs=3))
    recount = 100.0 * report.artifact.zero_count / report.artifact.size
    assert report.sparsity == recount == report.epochs[-1].sparsity
    assert report.sparsity == sparsity(model.enabled_layers())
    assert report.artifact.policy == "amt"


def test_eval_on_init_artifact_is_zero_shot(setup):
    model, task = setup
    report = run_mask_tuning(model, task, quick(epochs=1, lr=0.0))
    apply_artifact(model, report.artifact)
    assert evaluate(model, task.test_x, task.test_y, task.class_ids)[0] == report.zero_shot_accuracy


def test_determinism(setup, tmp_path):
    model, task = setup
    cfg = quick(regularized=True, leak=0.3, policy="pmt")
    a, b = run_mask_tuning(model, task, cfg), run_mask_tuning(model, task, cfg)
    assert a.artifact == b.artifact
    write_metrics(a, tmp_path / "a.txt")
    write_metrics(b, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_frozen_parameters_untouched(setup):
    model, task = setup
    before = model.checksum()
    run_mask_tuning(model, task, quick(policy="pmt", optimizer="sgd", lr_multiplier=1000.0))
    assert model.checksum() == before


def test_nan_loss_aborts(setup):
    model, task = setup
    bad = type(task)(task.train_x.copy(), task.train_y, task.test_x, task.test_y, task.class_ids, task.shots)
    bad.train_x[:] = np.nan
    with pytest.raises(TuningError, match="step 0"):
        run_mask_tuning(model, bad, quick())


def test_metrics_lines(setup):
    model, task = setup
    lines = run_mask_tuning(model, task, quick()).metric_lines()
    assert len(lines) == 3
    assert lines[0].startswith("epoch=0 ce_loss=") and "sparsity=" in lines[0]
    assert lines[-1].startswith("summary zero_shot=")
