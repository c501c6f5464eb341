import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from tapm.attacks import pgd_train_attack
from tapm.data_zoo import (CORRUPTIONS, GROUPS, REFERENCE_ZOO, DatasetSpec, TrainConfig,
                           TrainingDivergedError, ZooRow, build_zoo, corrupt, load_idx,
                           load_zoo, make_synthetic_dataset, patch_mix, save_zoo, shift_crop,
                           train_model, validate_zoo_spec)

SMALL = DatasetSpec(n_train=400, n_test=200)


@pytest.fixture(scope="module")
def reference():
    return make_synthetic_dataset(DatasetSpec())


@pytest.fixture(scope="module")
def normal_cnn(reference):
    train, test = reference
    return train_model("cnn-small", "normal", train, TrainConfig(), seed=11)


def test_generation_is_deterministic_and_seed_sensitive():
    a, _ = make_synthetic_dataset(SMALL)
    b, _ = make_synthetic_dataset(SMALL)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.spec_hash == b.spec_hash
    c, _ = make_synthetic_dataset(DatasetSpec(n_train=400, n_test=200, seed=1))
    assert c.spec_hash != a.spec_hash


def test_pixel_range_and_balance():
    train, test = make_synthetic_dataset(SMALL)
    for d in (train, test):
        assert d.images.min() >= 0 and d.images.max() <= 1
        counts = np.bincount(d.labels, minlength=4)
        assert counts.max() - counts.min() <= 1
    assert train.images.shape == (400, 3, 12, 12)


@pytest.mark.parametrize("kw", [{"classes": 2}, {"size": 7}])
def test_bad_specs_raise(kw):
    with pytest.raises(ValueError):
        make_synthetic_dataset(DatasetSpec(**kw))


def test_linear_probe_separates_classes(reference):
    train, test = reference
    probe = LogisticRegression(max_iter=2000).fit(train.images.reshape(len(train), -1), train.labels)
    assert probe.score(test.images.reshape(len(test), -1), test.labels) > 0.60


def test_normal_cnn_reaches_reference_accuracy(reference, normal_cnn):
    assert normal_cnn.accuracy(reference[1]) > 85.0
    assert normal_cnn.group == "normal"
    assert normal_cnn.id == "normal-cnn-small-s11"


def test_adversarial_training_beats_normal_under_white_box_pgd(reference, normal_cnn):
    train, test = reference
    cfg = TrainConfig()
    adv = train_model("cnn-small", "linf-adv", train, cfg, seed=11)
    x, y = test.images[:200], test.labels[:200]
    accs = []
    for m in (normal_cnn, adv):
        xa = pgd_train_attack(m.classifier, x, y, cfg.epsilon, 10, 2.5 * cfg.epsilon / 10, "linf",
                              np.random.default_rng(0))
        accs.append(np.mean(m.predict(xa) == y))
    assert accs[1] > accs[0]


def test_zero_epochs_is_chance_level():
    train, test = make_synthetic_dataset(DatasetSpec(n_train=64, n_test=400))
    m = train_model("mlp-small", "normal", train, TrainConfig(epochs=0), seed=0)
    assert abs(m.accuracy(test) - 25.0) <= 15.0  # untrained argmax is not uniform, just uninformed


def test_training_is_bitwise_reproducible():
    train, _ = make_synthetic_dataset(SMALL)
    cfg = TrainConfig(epochs=1)
    a = train_model("mixer-lite", "corruption", train, cfg, seed=3)
    b = train_model("mixer-lite", "corruption", train, cfg, seed=3)
    assert a.checkpoint_digest() == b.checkpoint_digest()


def test_divergence_reports_epoch():
    train, _ = make_synthetic_dataset(SMALL)
    with pytest.raises(TrainingDivergedError) as info:
        train_model("mlp-small", "normal", train, TrainConfig(epochs=2, lr=1e100), seed=0)
    assert info.value.epoch == 0


def test_zoo_spec_validation():
    assert len(REFERENCE_ZOO) == 8
    assert {r.group for r in REFERENCE_ZOO} == set(GROUPS)
    with pytest.raises(ValueError, match="duplicate"):
        validate_zoo_spec([ZooRow("mlp-small", "normal", 1), ZooRow("mlp-small", "normal", 1)])
    with pytest.raises(ValueError):
        validate_zoo_spec([ZooRow("resnet", "normal", 1)])
    with pytest.raises(ValueError):
        validate_zoo_spec([ZooRow("mlp-small", "weird", 1)])


def test_zoo_round_trip(tmp_path):
    train, test = make_synthetic_dataset(SMALL)
    rows = [ZooRow(a, g, i) for i, (a, g) in enumerate(
        [("mlp-small", "normal"), ("cnn-small", "linf-adv"), ("mlp-small", "l2-adv"),
         ("mixer-lite", "corruption")])]
    zoo = build_zoo(train, rows, TrainConfig(epochs=1, attack_steps=2), test=test)
    assert len({m.id for m in zoo}) == 4 and {m.group for m in zoo} == set(GROUPS)
    assert all(m.feature_tap is not None for m in zoo)
    save_zoo(zoo, tmp_path, train.spec_hash)
    back = load_zoo(tmp_path)
    for a, b in zip(zoo, back):
        assert a.id == b.id and a.checkpoint_digest() == b.checkpoint_digest()
        np.testing.assert_array_equal(a.predict(test.images[:20]), b.predict(test.images[:20]))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(CORRUPTIONS), st.integers(0, 2**32 - 1))
def test_corruptions_stay_in_range(kind, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 3, 8, 8))
    out = corrupt(x, kind, rng, 2.0)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


def test_patch_mix_area_and_shift_crop():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(5, 1, 8, 8))
    out, area, perm = patch_mix(x, rng, 0.25)
    assert area == pytest.approx(16 / 64)
    changed = np.any(out != x, axis=(1, 2, 3))
    assert np.all(changed == (perm != np.arange(5)))
    s = shift_crop(x, np.array([[0, 1]] * 5))
    np.testing.assert_array_equal(s[:, :, :, :-1], x[:, :, :, 1:])
    np.testing.assert_array_equal(shift_crop(x, np.zeros((5, 2), int)), x)


def test_idx_loader(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    header = bytes([0, 0, 0x08, 3]) + b"".join(int(d).to_bytes(4, "big") for d in data.shape)
    p = tmp_path / "x.idx"
    p.write_bytes(header + data.tobytes())
    np.testing.assert_array_equal(load_idx(p), data)
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(ValueError):
        load_idx(tmp_path / "bad")
