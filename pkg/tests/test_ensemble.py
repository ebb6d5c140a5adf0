import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plaquestrat.errors import FormatError, InfeasibleSplitError, ParameterError
from plaquestrat.ensemble import (EnsembleModel, balanced_subsets, certainty, certainty_weights, combine,
                                  combine_many, ensemble_from_bytes, ensemble_to_bytes, load_ensemble, predict,
                                  predict_batch, save_ensemble, stratified_split, train_ensemble)
from plaquestrat.model import build_model, model_to_bytes
from plaquestrat.training import TrainConfig

from conftest import make_manifest

probs = st.floats(0.0, 1.0, allow_nan=False)


# ---------------------------------------------------------------- splitting


def test_split_sizes_58_16():
    split = stratified_split(make_manifest(58, 16), seed=0)
    labels = split.labels
    counts = {s: (int(np.sum(labels[split.indices(s)] == 0)), int(np.sum(labels[split.indices(s)] == 1)))
              for s in ("train", "val", "test")}
    assert counts == {"train": (37, 10), "val": (7, 2), "test": (14, 4)}


def test_split_keeps_groups_together():
    split = stratified_split(make_manifest(60, 24, per_group=3), seed=5)
    seen = {}
    for e in split.entries:
        assert seen.setdefault(e.group, e.split) == e.split


def test_split_is_seeded():
    a = [e.split for e in stratified_split(make_manifest(30, 10), seed=1).entries]
    b = [e.split for e in stratified_split(make_manifest(30, 10), seed=1).entries]
    c = [e.split for e in stratified_split(make_manifest(30, 10), seed=2).entries]
    assert a == b and a != c


def test_split_needs_both_classes():
    with pytest.raises(InfeasibleSplitError):
        stratified_split(make_manifest(20, 0))
    with pytest.raises(InfeasibleSplitError):
        stratified_split(make_manifest(20, 2))


def test_subsets_37_10():
    labels = np.array([0] * 37 + [1] * 10)
    subsets = balanced_subsets(labels, 3, seed=0)
    assert [int(np.sum(labels[s] == 0)) for s in subsets] == [13, 12, 12]
    assert [len(s) for s in subsets] == [23, 22, 22]
    labels = np.array([1] * 10 + [0] * 30)
    assert [len(s) for s in balanced_subsets(labels, 3, seed=0)] == [20, 20, 20]


@given(st.integers(3, 60), st.integers(1, 30), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_subsets_partition_majority(n_major, n_minor, seed):
    n_minor = min(n_minor, n_major)
    labels = np.array([0] * n_major + [1] * n_minor)
    subsets = balanced_subsets(labels, 3, seed)
    majors = [set(s[labels[s] == 0].tolist()) for s in subsets]
    assert set().union(*majors) == set(range(n_major))
    assert sum(len(m) for m in majors) == n_major
    sizes = [len(m) for m in majors]
    assert max(sizes) - min(sizes) <= 1
    for s in subsets:
        assert sorted(s[labels[s] == 1].tolist()) == list(range(n_major, n_major + n_minor))


# ---------------------------------------------------------------- combination


def test_certainty_examples():
    assert certainty(0.5) == 0.5
    assert certainty(0.9) == certainty(0.1) == pytest.approx(0.9)
    assert certainty(0.0) == certainty(1.0) == 1.0
    with pytest.raises(ParameterError):
        certainty(1.2)


@given(probs)
def test_certainty_symmetric_and_bounded(y):
    assert certainty(y) == pytest.approx(certainty(1 - y), abs=1e-15)
    assert 0.5 <= certainty(y) <= 1.0


def test_combine_examples():
    p, label = combine([0.8, 0.3, 0.6], "average")
    assert p == pytest.approx(0.566667, abs=1e-6) and label == 1
    np.testing.assert_allclose(certainty_weights([0.8, 0.3, 0.6]), [0.380952, 0.333333, 0.285714], atol=1e-6)
    p, label = combine([0.8, 0.3, 0.6], "weighted")
    assert p == pytest.approx(0.576190, abs=1e-6) and label == 1
    p, label = combine([0.6, 0.7, 0.2], "vote", 0.5)
    assert p == pytest.approx(2 / 3) and label == 1
    assert combine([0.6, 0.2, 0.1], "vote", 0.5) == (pytest.approx(1 / 3), 0)


def test_threshold_boundary_is_positive():
    assert combine([0.465] * 3, "average", 0.465)[1] == 1
    assert combine([0.464] * 3, "average", 0.465)[1] == 0


@given(st.lists(probs, min_size=3, max_size=3), st.sampled_from(["vote", "average", "weighted"]))
def test_combination_is_permutation_invariant(ys, scheme):
    ref = combine(ys, scheme)
    for perm in itertools.permutations(ys):
        p, label = combine(list(perm), scheme)
        assert p == pytest.approx(ref[0], abs=1e-12) and label == ref[1]
    assert 0.0 <= ref[0] <= 1.0


@given(st.lists(probs, min_size=3, max_size=3))
def test_weights_sum_to_one(ys):
    assert certainty_weights(ys).sum() == pytest.approx(1.0, abs=1e-12)
    p = combine(ys, "weighted")[0]
    assert min(ys) - 1e-12 <= p <= max(ys) + 1e-12


def test_combine_many_matches_combine():
    ys = np.random.default_rng(0).uniform(size=(50, 3))
    for scheme in ("vote", "average", "weighted_average"):
        p, labels = combine_many(ys, scheme)
        assert [(float(a), int(b)) for a, b in zip(p, labels)] == [combine(row, scheme) for row in ys]


def test_unknown_scheme():
    with pytest.raises(ParameterError, match="unknown combination scheme"):
        combine([0.1, 0.2, 0.3], "median")


# ---------------------------------------------------------------- ensemble model


def _zero_fc_ensemble(cfg, scheme="average"):
    models = []
    for i in range(3):
        m = build_model(cfg, np.random.default_rng(i))
        m.params["fc2.weight"][:] = 0
        models.append(m)
    return EnsembleModel(models, scheme, 0.465)


def test_zero_fc_ensemble_predicts_half(tiny_config):
    ens = _zero_fc_ensemble(tiny_config)
    p, label, ys = predict(ens, np.random.default_rng(0).uniform(size=(10, 9, 1)))
    assert p == 0.5 and label == 1 and ys.tolist() == [0.5] * 3


def test_ensemble_needs_three_matching_models(tiny_config):
    m = build_model(tiny_config, np.random.default_rng(0))
    with pytest.raises(ParameterError):
        EnsembleModel([m, m])
    other = build_model(type(tiny_config)(input_size=(9, 9)), np.random.default_rng(0))
    with pytest.raises(ParameterError):
        EnsembleModel([m, m, other])


def test_ensemble_round_trip(tmp_path, tiny_config):
    ens = _zero_fc_ensemble(tiny_config, "weighted")
    ens.models[1].params["fc2.bias"][:] = [0.3, -0.2]
    save_ensemble(ens, tmp_path / "e.pqs")
    back = load_ensemble(tmp_path / "e.pqs")
    assert back.scheme == "weighted_average" and back.threshold == 0.465
    assert ensemble_to_bytes(back) == ensemble_to_bytes(ens)
    images = np.random.default_rng(0).uniform(size=(4, 10, 9, 1))
    assert predict_batch(back, images)[2].tobytes() == predict_batch(ens, images)[2].tobytes()


def test_ensemble_file_errors(tiny_config):
    blob = ensemble_to_bytes(_zero_fc_ensemble(tiny_config))
    with pytest.raises(FormatError, match="truncated"):
        ensemble_from_bytes(blob[:-3])
    with pytest.raises(FormatError, match="trailing"):
        ensemble_from_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        ensemble_from_bytes(model_to_bytes(build_model(tiny_config, np.random.default_rng(0))))


def test_train_ensemble_independent_of_jobs(tiny_config):
    manifest = stratified_split(make_manifest(24, 8), seed=0)
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 0.5, size=(32, 10, 9, 1))
    images[manifest.labels == 1, :5] += 0.5
    cfg = TrainConfig(max_epochs=2, phase2_epochs=2, batch_size=4)
    e1, r1 = train_ensemble(manifest, images, tiny_config, cfg, seed=3, jobs=1)
    e3, r3 = train_ensemble(manifest, images, tiny_config, cfg, seed=3, jobs=3)
    assert ensemble_to_bytes(e1) == ensemble_to_bytes(e3)
    assert [r.phase1 for r in r1] == [r.phase1 for r in r3]
    assert len({model_to_bytes(m) for m in e1.models}) == 3
