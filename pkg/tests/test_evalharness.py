import dataclasses

import numpy as np
import pytest
import torch

from dualmim.errors import ConfigError
from dualmim.evalharness import (
    AblationConfig,
    DataConfig,
    EvalConfig,
    alignment_gap,
    linear_probe,
    miou,
    probe_features,
    run_ablation,
    segment_eval,
    split_indices,
    token_features,
)
from dualmim.model import init_model
from dualmim.nn_core import EncoderConfig
from dualmim.synthdata import DEFAULT_PRESETS, generate_corpus
from dualmim.tileio import compute_all_stats
from dualmim.trainer import TrainConfig, normalize_all

ENC = dict(image_size=16, patch_size=4, embed_dim=8, depth=1, heads=2, window=2, mlp_ratio=2.0)
QUICK = EvalConfig(seeds=(0, 1), probe_steps=50, seg_steps=30)


@pytest.fixture(scope="module")
def tiny_model():
    return init_model(EncoderConfig(in_channels=3, **ENC), EncoderConfig(in_channels=1, **ENC), seed=0)


@pytest.fixture(scope="module")
def tiles():
    return generate_corpus(DEFAULT_PRESETS.values(), 8, 16, seed=3)


def test_miou_examples():
    t = np.array([0, 0, 0, 0, 1, 1, 2, 2])
    assert miou(t, t) == 1.0
    assert abs(miou(np.zeros_like(t), t) - 0.5 / 3) < 1e-12
    # hand count: class0 I=3 U=5, class1 I=1 U=2, class2 I=2 U=3
    p = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    t2 = np.array([0, 0, 0, 0, 1, 0, 2, 2])
    want = (3 / 5 + 1 / 2 + 2 / 3) / 3
    # recompute unions: class0 pred{0,1,2} true{0,1,2,3,5} -> U=5; class1 pred{3,4} true{4} -> U=2
    assert abs(miou(p, t2) - want) < 1e-12
    # a class absent from both is left out
    assert miou(np.array([0, 1]), np.array([0, 1])) == 1.0


def test_miou_bounds(rng):
    for _ in range(20):
        p, t = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
        assert 0.0 <= miou(p, t) <= 1.0


def test_split_is_seeded_and_80_20():
    tr, te = split_indices(50, 3)
    assert len(tr) == 40 and len(te) == 10 and not set(tr) & set(te)
    assert np.array_equal(split_indices(50, 3)[0], tr)
    assert not np.array_equal(split_indices(50, 4)[0], tr)


def test_probe_separable_and_uninformative():
    labels = np.repeat([0, 1, 2], 20)
    sep = torch.nn.functional.one_hot(torch.from_numpy(labels), 3).double()
    assert probe_features(sep, labels, [0, 1, 2]) == [1.0, 1.0, 1.0]
    same = torch.ones(60, 4, dtype=torch.float64)
    labels = np.array([0] * 42 + [1] * 12 + [2] * 6)
    for seed, acc in zip(range(3), probe_features(same, labels, range(3))):
        _, te = split_indices(60, seed)
        # constant features: the head predicts the training majority class everywhere
        assert acc == pytest.approx(np.mean(labels[te] == 0))
    with pytest.raises(ValueError):
        probe_features(same, np.zeros(60, dtype=int), [0])


def test_encoders_frozen_and_seed_isolation(tiny_model, tiles):
    before = {k: v.clone() for k, v in tiny_model.params.items()}
    stats = compute_all_stats(tiles)
    a = linear_probe(tiny_model, tiles, "rgb", [0], stats, QUICK)
    s = segment_eval(tiny_model, tiles, "rgb+dsm", [0, 5], stats, QUICK)
    assert all(torch.equal(before[k], tiny_model.params[k]) for k in before)
    assert linear_probe(tiny_model, tiles, "rgb", [0], stats, QUICK) == a
    assert all(0.0 <= v <= 1.0 for v in a + s)


def test_fused_features_width(tiny_model, tiles):
    data = normalize_all(tiles[:2], compute_all_stats(tiles))
    assert token_features(tiny_model, data, "rgb").shape == (2, 16, 8)
    assert token_features(tiny_model, data, "rgb+dsm").shape == (2, 16, 16)
    with pytest.raises(ConfigError):
        token_features(tiny_model, data, "lidar")
    with pytest.raises(ValueError):
        token_features(tiny_model, [data[0].replace(dsm=None)], "dsm")


def test_alignment_gap_keys(tiny_model, tiles):
    out = alignment_gap(tiny_model, tiles)
    assert set(out) == {"positive", "negative", "gap"}
    assert out["gap"] == pytest.approx(out["positive"] - out["negative"])


def test_ablation_table_structure(tiles):
    train = TrainConfig(
        epochs=1, batch_size=4, image_size=16,
        rgb_encoder=EncoderConfig(in_channels=3, **ENC), dsm_encoder=EncoderConfig(in_channels=1, **ENC),
    )
    cfg = AblationConfig(train=train, data=DataConfig(), eval=QUICK, modalities=("rgb", "rgb+dsm"))
    corpora = (tiles[0::2], tiles[1::2])
    table = run_ablation(cfg, corpora=corpora)
    assert table.keys() == [(i, m) for i in ("random", "mim", "mim+contrastive") for m in ("rgb", "rgb+dsm")]
    for cell in table.cells.values():
        assert cell.seeds == [0, 1]
        assert len(cell.probe_accuracy) == 2 and len(cell.seg_miou) == 2
    recs = table.records()
    assert len(recs) == 6 * 2 * 2
    assert recs[0].split("\t")[:4] == ["random", "rgb", "probe_accuracy", "0"]
    again = run_ablation(cfg, corpora=corpora)
    assert again.records() == recs
    assert "mim+contrastive" in table.report()


def test_ablation_config_validation():
    with pytest.raises(ConfigError):
        AblationConfig(inits=("supervised",))
    with pytest.raises(ConfigError):
        EvalConfig(seeds=())
