"""Model assembly, prediction contracts, training-loop behavior, and the
checkpoint format."""

import numpy as np
import pytest

from seglab import autodiff as ad
from seglab.data import generate_dataset
from seglab.losses import LossConfig, dice_loss
from seglab.model import (
    CheckpointBadMagicError,
    CheckpointBadVersionError,
    CheckpointTruncatedError,
    ModelConfig,
    OptimizerConfig,
    TrainingError,
    TrainSettings,
    UNCERTAINTY_PARAM,
    build_model,
    load_checkpoint,
    model_forward,
    bind_params,
    parameter_count,
    predict,
    predict_batch,
    save_checkpoint,
    train,
    train_epoch,
)

SMALL = ModelConfig(stages=2, base_width=4, d_state=2, seed=0)


def small_dataset(n=8, seed=3):
    return generate_dataset(n, seed=seed, h=32, w=32)


def params_bytes(model):
    return b"".join(model.params[name].tobytes() for name in model.params.names())


def test_build_model_seeded_determinism():
    a = build_model(ModelConfig(seed=5))
    b = build_model(ModelConfig(seed=5))
    c = build_model(ModelConfig(seed=6))
    assert params_bytes(a) == params_bytes(b)
    assert params_bytes(a) != params_bytes(c)


def test_more_stages_strictly_more_parameters():
    two = build_model(ModelConfig(stages=2))
    three = build_model(ModelConfig(stages=3))
    assert parameter_count(three) > parameter_count(two)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Layer-by-layer shape arithmetic, written independently of the builder."""
    widths = [cfg.base_width * 2**i for i in range(cfg.stages)]

    def res_block(cin, cout):
        n = 9 * cin * cout + cout          # conv1 + bias
        n += 2 * cout                      # norm1 affine
        n += 9 * cout * cout + cout        # conv2 + bias
        n += 2 * cout                      # norm2 affine
        if cin != cout:
            n += cin * cout                # 1x1 projection, no bias
        return n

    def seq_block(c, d):
        n = 2 * c                          # norm affine
        n += c * c + c                     # ssm-branch input projection
        n += 3 * c + c                     # depthwise mix kernel + bias
        n += d * d + d * c + c * d + c * c # A, B, C, D
        n += c * c + c                     # gate projection
        n += c * c + c                     # output projection
        return n

    total = 0
    for i, w in enumerate(widths):
        cin = cfg.in_channels if i == 0 else w
        total += res_block(cin, w) + res_block(w, w) + seq_block(w, cfg.d_state)
        if i + 1 < cfg.stages:
            total += 4 * w * widths[i + 1] + widths[i + 1]        # stride-2 down conv
    for j in range(cfg.stages - 2, -1, -1):
        total += 4 * widths[j + 1] * widths[j] + widths[j]        # transposed conv
        total += 2 * widths[j] * widths[j] + widths[j]            # 1x1 reduce
        total += res_block(widths[j], widths[j])
    total += widths[0] * cfg.classes + cfg.classes                # head
    return total


@pytest.mark.parametrize("cfg", [ModelConfig(), SMALL, ModelConfig(stages=4, base_width=8)])
def test_parameter_count_matches_shape_arithmetic(cfg):
    assert parameter_count(build_model(cfg)) == expected_parameter_count(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(stages=1)
    with pytest.raises(ValueError):
        ModelConfig(classes=1)
    with pytest.raises(ValueError):
        ModelConfig(base_width=0)


def test_predict_probability_map_contract():
    model = build_model(SMALL)
    image = np.random.default_rng(0).random((32, 32))
    probs = predict(model, image)
    assert probs.shape == (4, 32, 32)
    assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-6
    assert probs.min() >= 0.0


def test_predict_rejects_indivisible_spatial_size():
    model = build_model(SMALL)
    with pytest.raises(ad.ShapeError, match="divisible"):
        predict(model, np.zeros((33, 33)))


def test_predict_batch_matches_single():
    model = build_model(SMALL)
    rng = np.random.default_rng(1)
    images = rng.random((3, 1, 32, 32))
    batched = predict_batch(model, images)
    for i in range(3):
        assert np.abs(batched[i] - predict(model, images[i])).max() < 1e-12


def test_end_to_end_gradient_probe_8x8():
    cfg = ModelConfig(stages=2, base_width=4, d_state=2, seed=1)
    model = build_model(cfg)
    rng = np.random.default_rng(2)
    image = rng.random((1, 8, 8, 1))
    labels = rng.integers(0, 4, (1, 8, 8))
    name = "dec0.rb.conv2.w"
    point = model.params[name]

    def f(t):
        g = t.graph
        leaves = {n: (t if n == name else g.leaf(a)) for n, a in model.params.items()}
        probs = model_forward(cfg, leaves, g.leaf(image))
        return dice_loss(ad.transpose(probs, (0, 3, 1, 2)), labels)

    coords = np.random.default_rng(3).choice(point.size, 10, replace=False)
    assert ad.grad_check(f, point, coords=[int(c) for c in coords]) < 1e-4


def settings_for(epochs=1, objective="ua", optimizer="sgd", lr=5e-3):
    return TrainSettings(
        epochs=epochs, batch_size=4, seed=0, objective=objective,
        loss=LossConfig(),
        optimizer=OptimizerConfig(kind=optimizer, lr=lr, rho=0.05),
    )


def test_train_epoch_lr_zero_keeps_parameters():
    model = build_model(SMALL)
    original = {n: model.params[n].copy() for n in model.params.names()}
    stats = train_epoch(model, small_dataset(), settings_for(lr=0.0), epoch=0)
    for name, value in original.items():
        assert model.params[name].tobytes() == value.tobytes(), name
    # the uncertainty parameters appear at training start and stay at zero
    assert np.array_equal(model.params[UNCERTAINTY_PARAM], np.zeros(3))
    assert np.isfinite(stats.mean_loss)


def test_train_epoch_deterministic():
    data = small_dataset()
    a = build_model(SMALL)
    b = build_model(SMALL)
    sa = train_epoch(a, data, settings_for(), epoch=0)
    sb = train_epoch(b, data, settings_for(), epoch=0)
    assert sa.mean_loss == sb.mean_loss
    assert sa.component_means == sb.component_means
    assert np.array_equal(sa.sigmas, sb.sigmas)
    assert params_bytes(a) == params_bytes(b)


def test_train_epoch_updates_parameters_and_sigma():
    model = build_model(SMALL)
    before = params_bytes(model)
    stats = train_epoch(model, small_dataset(), settings_for(), epoch=0)
    assert params_bytes(model) != before
    assert stats.sigmas.shape == (3,)
    assert stats.n_batches == 2


def test_train_ce_objective_has_no_sigma():
    model = build_model(SMALL)
    stats = train_epoch(model, small_dataset(), settings_for(objective="ce"), epoch=0)
    assert stats.sigmas.size == 0
    assert UNCERTAINTY_PARAM not in model.params


def test_train_with_sam_runs_and_differs_from_sgd():
    data = small_dataset()
    sgd_model = build_model(SMALL)
    sam_model = build_model(SMALL)
    train_epoch(sgd_model, data, settings_for(optimizer="sgd"), epoch=0)
    train_epoch(sam_model, data, settings_for(optimizer="sam"), epoch=0)
    assert params_bytes(sgd_model) != params_bytes(sam_model)


def test_train_loss_decreases_over_epochs():
    model = build_model(ModelConfig(stages=2, base_width=8, d_state=4, seed=0))
    data = generate_dataset(24, seed=5, h=32, w=32)
    settings = TrainSettings(epochs=6, batch_size=8, seed=0, objective="ua",
                             optimizer=OptimizerConfig(kind="sgd", lr=5e-3))
    history = train(model, data, settings)
    assert history[-1].mean_loss < history[0].mean_loss


def test_empty_dataset_rejected():
    model = build_model(SMALL)
    with pytest.raises(ValueError):
        train_epoch(model, [], settings_for(), epoch=0)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = build_model(ModelConfig(seed=9))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    assert loaded.params.names() == model.params.names()
    assert params_bytes(loaded) == params_bytes(model)
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corruption_errors(tmp_path):
    model = build_model(SMALL)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "a.ckpt"
    bad_magic.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointBadMagicError):
        load_checkpoint(bad_magic)

    bad_version = tmp_path / "b.ckpt"
    bad_version.write_bytes(raw[:8] + (9).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointBadVersionError):
        load_checkpoint(bad_version)

    truncated = tmp_path / "c.ckpt"
    truncated.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(truncated)


def test_model_shapes_across_input_sizes():
    model = build_model(ModelConfig(seed=0))  # 3 stages: needs divisibility by 4
    for h, w in ((32, 32), (32, 64)):
        probs = predict(model, np.random.default_rng(0).random((h, w)))
        assert probs.shape == (4, h, w)
