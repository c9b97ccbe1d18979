from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from probex.errors import ConfigError, DimensionError, FormatError
from probex.linalg import make_rng
from probex.zoo import (
    TaskSpec,
    TargetNet,
    build_zoo,
    load_zoo,
    lora_reconstruct,
    make_splits,
    pretrain_root,
    save_zoo,
    spawn_population,
)


def test_default_task_shapes():
    spec = TaskSpec()
    assert spec.layer_shapes == [(64, 32), (64, 64), (50, 64)]
    assert spec.layer_names == ["fc1", "fc2", "fc3"]


def test_targetnet_rejects_bad_chain():
    with pytest.raises(DimensionError):
        TargetNet([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_pretrain_root_deterministic(tiny_spec):
    a, b = pretrain_root(tiny_spec, 7), pretrain_root(tiny_spec, 7)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)


def test_pretrain_root_above_chance_on_b():
    spec = TaskSpec()
    root = pretrain_root(spec, 0)
    classes = np.arange(spec.universe_size, spec.universe_size + spec.pretrain_size)
    x, y = spec.sample(classes, 40, make_rng(99))
    acc = root.accuracy(x, y - spec.universe_size)
    assert acc > 2.0 / spec.pretrain_size


def test_pretrain_root_errors(tiny_spec):
    with pytest.raises(ConfigError):
        pretrain_root(tiny_spec, 0, epochs=0)
    with pytest.raises(ConfigError):
        pretrain_root(replace(tiny_spec, pretrain_size=10), 0)


def test_tree_models_share_init(tiny_spec):
    root = pretrain_root(tiny_spec, 1)
    recs = spawn_population(root, 2, tiny_spec, seed=1, tree_id="T0", keep_init=True)
    assert recs[0].tree_id == recs[1].tree_id
    for name in tiny_spec.layer_names:
        assert np.array_equal(recs[0].init_layers[name], recs[1].init_layers[name])
        assert not np.array_equal(recs[0].layers[name], recs[1].layers[name])


def test_forest_models_have_distinct_inits(tiny_spec):
    recs = spawn_population(None, 5, tiny_spec, seed=1, keep_init=True)
    assert len({r.tree_id for r in recs}) == 5
    for i in range(5):
        for j in range(i):
            assert np.linalg.norm(recs[i].init_layers["fc1"] - recs[j].init_layers["fc1"]) > 0


def test_population_size_error(tiny_spec):
    with pytest.raises(ConfigError):
        spawn_population(None, 0, tiny_spec, seed=1)


def test_label_bits_balance(tiny_spec):
    recs = spawn_population(pretrain_root(tiny_spec, 2), 200, tiny_spec, seed=2)
    bits = np.stack([r.label_bits for r in recs])
    assert np.all(bits.sum(axis=1) == tiny_spec.subset_size)
    assert abs(bits.mean() - 0.5) <= 0.05


def test_fine_tuning_beats_chance():
    spec = TaskSpec()
    tree = spawn_population(pretrain_root(spec, 6), 12, spec, seed=6, tree_id="T0")
    forest = spawn_population(None, 12, spec, seed=6)
    for r in tree + forest:
        assert r.hyperparams["test_acc"] > 2.0 / spec.subset_size


def test_hyperparameters_from_declared_ranges(tiny_tree, tiny_spec):
    for r in tiny_tree.records:
        assert r.hyperparams["lr"] in tiny_spec.lr_grid
        assert tiny_spec.epoch_range[0] <= r.hyperparams["epochs"] <= tiny_spec.epoch_range[1]


def test_splits_disjoint_cover_and_reproducible(tiny_tree):
    s = tiny_tree.splits
    ids = [r.model_id for r in tiny_tree.records]
    allocated = s["train"] + s["val"] + s["test"]
    assert sorted(allocated) == sorted(ids)
    assert len(set(allocated)) == len(allocated)
    assert make_splits(ids, tiny_tree.seed) == s
    assert len(s["train"]) == 21 and len(s["val"]) == 3 and len(s["test"]) == 6


def test_bad_split_ratios():
    with pytest.raises(ConfigError):
        make_splits(["a", "b"], 0, (0.5, 0.6, 0.1))


def test_intra_tree_distances_smaller(tiny_multitree):
    recs = tiny_multitree.records
    intra, inter = [], []
    for i in range(len(recs)):
        for j in range(i):
            d = np.linalg.norm(recs[i].layer("fc1") - recs[j].layer("fc1"))
            (intra if recs[i].tree_id == recs[j].tree_id else inter).append(d)
    assert np.mean(intra) < np.mean(inter)


def test_multitree_partition(tiny_spec):
    zoo, _ = build_zoo("multitree:3", 10, 0, tiny_spec)
    sizes = [sum(r.tree_id == t for r in zoo.records) for t in zoo.trees]
    assert zoo.trees == ["T0", "T1", "T2"] and sizes == [4, 3, 3]


def test_build_zoo_errors(tiny_spec):
    with pytest.raises(ConfigError):
        build_zoo("tree", 0, 0, tiny_spec)
    with pytest.raises(ConfigError):
        build_zoo("bush", 3, 0, tiny_spec)
    with pytest.raises(ConfigError):
        build_zoo("multitree:x", 3, 0, tiny_spec)


def test_generation_independent_of_thread_count(tiny_spec):
    root = pretrain_root(tiny_spec, 4)
    a = spawn_population(root, 4, tiny_spec, seed=4, threads=1)
    b = spawn_population(root, 4, tiny_spec, seed=4, threads=2)
    for ra, rb in zip(a, b):
        assert ra.model_id == rb.model_id
        assert np.array_equal(ra.layers["fc2"], rb.layers["fc2"])


def assert_zoos_equal(a, b):
    assert a.universe_size == b.universe_size and a.subset_size == b.subset_size
    assert a.trees == b.trees and a.splits == b.splits and a.seed == b.seed
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.model_id == rb.model_id and ra.tree_id == rb.tree_id
        assert ra.embedding_key == rb.embedding_key
        assert ra.hyperparams == rb.hyperparams
        assert np.array_equal(ra.label_bits, rb.label_bits)
        assert ra.layer_names == rb.layer_names
        for n in ra.layers:
            assert np.array_equal(ra.layers[n], rb.layers[n])
        for n in ra.lora:
            assert np.array_equal(ra.lora[n][0], rb.lora[n][0])
            assert np.array_equal(ra.lora[n][1], rb.lora[n][1])


def test_round_trip_bit_exact(tmp_path, tiny_tree, tiny_align):
    save_zoo(tiny_tree, tmp_path / "t")
    assert_zoos_equal(tiny_tree, load_zoo(tmp_path / "t"))
    zoo, _ = tiny_align
    save_zoo(zoo, tmp_path / "a")
    back = load_zoo(tmp_path / "a")
    assert_zoos_equal(zoo, back)
    assert back.holdout_classes == zoo.holdout_classes


def test_manifest_is_deterministic(tmp_path, tiny_tree):
    save_zoo(tiny_tree, tmp_path / "x")
    save_zoo(tiny_tree, tmp_path / "y")
    assert (tmp_path / "x/manifest.json").read_bytes() == (tmp_path / "y/manifest.json").read_bytes()
    m = json.loads((tmp_path / "x/manifest.json").read_text())
    for key in ("universe_size", "subset_size", "trees", "splits", "records"):
        assert key in m
    rec = m["records"][0]
    assert int(rec["label_bits"], 16).bit_count() == tiny_tree.subset_size


def test_corrupt_magic_is_format_error(tmp_path, tiny_forest):
    save_zoo(tiny_forest, tmp_path / "z")
    f = next((tmp_path / "z/tensors").glob("*.wzt"))
    buf = bytearray(f.read_bytes())
    buf[:4] = b"ZZZZ"
    f.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match=f.name):
        load_zoo(tmp_path / "z")


def test_manifest_shape_mismatch_names_both(tmp_path, tiny_forest):
    save_zoo(tiny_forest, tmp_path / "z")
    mpath = tmp_path / "z/manifest.json"
    m = json.loads(mpath.read_text())
    m["records"][0]["layers"]["fc1"]["shape"] = [3, 4]
    mpath.write_text(json.dumps(m))
    with pytest.raises(FormatError, match=r"\(3, 4\).*\(12, 8\)"):
        load_zoo(tmp_path / "z")


def test_version_mismatch(tmp_path, tiny_forest):
    save_zoo(tiny_forest, tmp_path / "z")
    mpath = tmp_path / "z/manifest.json"
    m = json.loads(mpath.read_text())
    m["format_version"] = 99
    mpath.write_text(json.dumps(m))
    with pytest.raises(FormatError):
        load_zoo(tmp_path / "z")


def test_lora_reconstruct(rng):
    a = rng.standard_normal((6, 9))
    assert np.array_equal(lora_reconstruct(np.eye(6), a), a)
    assert np.array_equal(lora_reconstruct(np.zeros((5, 6)), a), np.zeros((5, 9)))
    x = lora_reconstruct(rng.standard_normal((64, 16)), rng.standard_normal((16, 64)))
    s = np.linalg.svd(x, compute_uv=False)
    assert np.all(s[16:] < 1e-8)
    with pytest.raises(DimensionError):
        lora_reconstruct(np.ones((3, 2)), np.ones((3, 2)))


def test_alignment_zoo_structure(tiny_align):
    zoo, emb = tiny_align
    assert len(zoo.holdout_classes) == 3
    for r in zoo.records:
        assert r.embedding_key in emb
        b, a = r.lora["fc1"]
        assert b.shape[1] == a.shape[0] == 2
        assert r.layer("fc1").shape == (12, 8)
    for v in emb.values():
        assert abs(np.linalg.norm(v) - 1) < 1e-12


def test_missing_layer_is_config_error(tiny_forest):
    with pytest.raises(ConfigError):
        tiny_forest.records[0].layer("fc9")
