import dataclasses
import struct

import numpy as np
import pytest

from dsbel.checkpoint import (
    MAGIC, CheckpointError, decode_sections, load_checkpoint, load_ensemble_payload, save_checkpoint,
)
from dsbel.ingestion import generate_surrogate_corpus, generate_synthetic_corpus
from dsbel.model import Model, ModelConfig, build_model, images_to_input, parameter_count, pretrain_auxiliary
from dsbel.tensor import ConfigError, Tensor, dense, grad_check, softmax_xent
from dsbel.training import SplitPlan, TrainConfig, train

TINY = ModelConfig(stm_widths=(2, 2, 2), side=16, fusion_width=8, seed=3)


def enumerate_params(config):
    """Count weights by walking the architecture description independently."""
    total, c = 0, config.in_channels
    for s in config.stm_widths:
        total += 2 * (c * s + s)          # boundary and region 1x1 convs
        total += 2 * (c * 9 * s + s)      # two dilated 3x3 convs
        c = 4 * s
    total *= 2                            # main and aux stems
    merged = [4 * s for s in config.stm_widths]
    fused_in = 2 * (merged[1] + merged[2])
    total += fused_in * config.fusion_width + config.fusion_width
    total += config.fusion_width * config.num_classes + config.num_classes
    return total


# ---- configuration and construction -------------------------------------

def test_default_merged_widths_and_boost_channels():
    cfg = ModelConfig()
    assert cfg.merged_widths == [128, 256, 512]
    assert cfg.boosted_channels == 2 * (256 + 512)


@pytest.mark.parametrize("widths", [(32, 64, 128), (1, 1, 1), (2, 3, 5), (8, 8, 8)])
def test_parameter_count_closed_form_matches_enumeration(widths):
    cfg = ModelConfig(stm_widths=widths, fusion_width=16 if widths != (32, 64, 128) else 512)
    model = build_model(cfg)
    assert parameter_count(cfg) == enumerate_params(cfg) == model.parameter_count()


def test_unit_widths_merge_to_four():
    assert ModelConfig(stm_widths=(1, 1, 1)).merged_widths == [4, 4, 4]


@pytest.mark.parametrize("bad", [dict(stm_widths=(4, 4)), dict(stm_widths=(4, 0, 4)), dict(side=4),
                                 dict(dropout=1.0), dict(num_classes=1)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({"bogus": 1})


def test_same_seed_gives_identical_parameters():
    a, b = build_model(TINY), build_model(TINY)
    for (na, ta), (nb, tb) in zip(a.params.items(), b.params.items()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    c = build_model(dataclasses.replace(TINY, seed=4))
    assert a.params["main.stm1.dilated1.weight"].data.tobytes() != c.params["main.stm1.dilated1.weight"].data.tobytes()


def test_he_uniform_bounds_and_zero_bias():
    model = build_model(ModelConfig(stm_widths=(4, 4, 4), fusion_width=16))
    w = model.params["main.stm2.dilated2.weight"].data
    bound = np.sqrt(6.0 / (16 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound
    assert all(not t.data.any() for n, t in model.params.items() if n.endswith(".bias"))


# ---- forward --------------------------------------------------------------

def test_zero_input_zero_head_gives_even_odds():
    model = build_model(TINY)
    model.head.weight.data[:] = 0
    _, probs = model.forward(np.zeros((3, 1, 16, 16), np.float32))
    np.testing.assert_array_equal(probs, np.full((3, 2), 0.5))


def test_probabilities_sum_to_one_over_many_inputs():
    model = build_model(TINY)
    rng = np.random.default_rng(0)
    x = rng.random((1000, 1, 16, 16)).astype(np.float32) * rng.uniform(0, 50, (1000, 1, 1, 1)).astype(np.float32)
    probs = model.predict_proba(x, batch_size=250)
    assert probs.shape == (1000, 2)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_identical_images_give_identical_rows():
    model = build_model(TINY)
    x = np.repeat(np.random.default_rng(1).random((1, 1, 16, 16), dtype=np.float32), 5, axis=0)
    _, probs = model.forward(x)
    feats = model.extract_features(x)
    assert (probs == probs[0]).all() and (feats == feats[0]).all()


def test_features_shape_and_zero_image():
    model = build_model(ModelConfig(stm_widths=(2, 2, 2), side=16, fusion_width=512))
    feats = model.extract_features(np.zeros((4, 1, 16, 16), np.float32))
    assert feats.shape == (4, 512)
    assert not feats.any()


def test_forward_rejects_wrong_shape():
    with pytest.raises(ConfigError):
        build_model(TINY).forward(np.zeros((1, 1, 8, 8), np.float32))


def bind(model, tensors):
    """Same architecture, parameters replaced by ``tensors`` (in ``params`` order)."""
    names = list(model.params)
    lookup = dict(zip(names, tensors))
    convs = {n: dataclasses.replace(s, weight=lookup[f"{n}.weight"], bias=lookup[f"{n}.bias"])
             for n, s in model.convs.items()}
    head = dataclasses.replace(model.head, weight=lookup["head.weight"], bias=lookup["head.bias"])
    return Model(model.config, convs, head)


def test_end_to_end_gradient_check():
    model = build_model(TINY, dtype=np.float64)
    rng = np.random.default_rng(9)
    for n, t in model.params.items():
        if n.endswith(".bias"):
            t.data = rng.uniform(0.05, 0.3, t.shape)
    x = rng.random((2, 1, 16, 16))
    labels = [0, 1]

    def loss(*ps):
        m = bind(model, ps)
        return softmax_xent(dense(m.feature_tensor(Tensor(x)), m.head), labels)[1]

    params = list(model.params.values())
    assert sum(p.size for p in params) == parameter_count(TINY)
    assert grad_check(loss, params, eps=1e-6) < 1e-3


# ---- auxiliary pretraining ------------------------------------------------

def test_pretrain_zero_epochs_keeps_init_and_freezes():
    model = build_model(TINY)
    before = model.stem_bytes("aux")
    pretrain_auxiliary(model, generate_surrogate_corpus(4, side=16, seed=0), 0)
    assert model.aux_frozen
    assert model.stem_bytes("aux") == before
    assert all(not t.requires_grad for n, t in model.params.items() if n.startswith("aux."))


def test_pretrain_loss_decreases_over_three_epochs():
    cfg = ModelConfig(stm_widths=(4, 4, 4), side=32, fusion_width=16)
    model = build_model(cfg)
    main_before = model.stem_bytes("main")
    pretrain_auxiliary(model, generate_surrogate_corpus(32, side=32, seed=1), 3)
    loss = model.aux_pretrain_loss
    assert len(loss) == 3 and loss[0] > loss[1] > loss[2]
    assert model.stem_bytes("main") == main_before


def test_pretrain_rejects_empty_surrogate():
    from dsbel.ingestion import LabeledDataset
    with pytest.raises(ConfigError):
        pretrain_auxiliary(build_model(TINY), LabeledDataset([]), 1)


def test_frozen_aux_is_byte_stable_across_training():
    model = build_model(TINY)
    pretrain_auxiliary(model, generate_surrogate_corpus(4, side=16, seed=0), 1)
    aux, main = model.stem_bytes("aux"), model.stem_bytes("main")
    ds = generate_synthetic_corpus(8, side=16, seed=2)
    plan = SplitPlan(np.arange(0, 16, 2), np.arange(1, 16, 4), np.arange(3, 16, 4), 0)
    train(model, ds, plan, TrainConfig(epochs=2, augment=False, learning_rate=1e-2))
    assert model.stem_bytes("aux") == aux
    assert model.stem_bytes("main") != main


def test_train_requires_frozen_aux():
    ds = generate_synthetic_corpus(5, side=16)
    plan = SplitPlan(np.arange(6), np.arange(6, 8), np.arange(8, 10), 0)
    with pytest.raises(ConfigError):
        train(build_model(TINY), ds, plan, TrainConfig(epochs=1))


# ---- checkpoints -----------------------------------------------------------

@pytest.fixture
def saved(tmp_path):
    model = build_model(TINY)
    pretrain_auxiliary(model, generate_surrogate_corpus(4, side=16, seed=0), 1)
    path = tmp_path / "m.dsbl"
    save_checkpoint(model, path)
    return model, path


def test_checkpoint_round_trip_is_bit_exact(saved, tmp_path):
    model, path = saved
    loaded = load_checkpoint(path)
    assert loaded.config == model.config and loaded.aux_frozen
    for (n, a), (m, b) in zip(model.params.items(), loaded.params.items()):
        assert n == m and a.data.tobytes() == b.data.tobytes()
    again = tmp_path / "again.dsbl"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()
    x = np.random.default_rng(0).random((2, 1, 16, 16), dtype=np.float32)
    np.testing.assert_array_equal(model.forward(x)[1], loaded.forward(x)[1])


def test_checkpoint_carries_ensemble_payload(saved, tmp_path):
    model, path = saved
    assert load_ensemble_payload(path) is None
    save_checkpoint(model, tmp_path / "e.dsbl", ensemble={"k": [1, 2]})
    assert load_ensemble_payload(tmp_path / "e.dsbl") == {"k": [1, 2]}


def test_checkpoint_flipped_byte_fails_checksum(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[-20] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_sections(bytes(data))


def test_checkpoint_wrong_magic(saved):
    _, path = saved
    with pytest.raises(CheckpointError, match="magic"):
        decode_sections(b"XXXX" + path.read_bytes()[4:])


def test_checkpoint_version_mismatch(saved):
    _, path = saved
    data = path.read_bytes()
    assert data[:4] == MAGIC
    with pytest.raises(CheckpointError, match="version"):
        decode_sections(data[:4] + struct.pack("<H", 99) + data[6:])


@pytest.mark.parametrize("keep", [0, 10, 200])
def test_checkpoint_truncated(saved, keep):
    _, path = saved
    with pytest.raises(CheckpointError):
        decode_sections(path.read_bytes()[:keep])


def test_load_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.dsbl")


def test_images_to_input_scales_to_unit_range():
    x = images_to_input(np.array([[[0, 255], [51, 102]]], np.uint8))
    assert x.shape == (1, 1, 2, 2) and x.dtype == np.float32
    np.testing.assert_allclose(x[0, 0], [[0, 1], [0.2, 0.4]], rtol=1e-6)
