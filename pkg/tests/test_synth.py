"""Synthetic generator: determinism, separability oracle, nesting, round trip."""

import numpy as np
import pytest

from flowmoe.ingest import ExtractionConfig, flows_to_features, read_flow_records
from flowmoe.synth import GeneratorSpec, emit_files, generate_dataset


def nearest_centroid_accuracy(features, labels, train_frac=0.5, seed=0):
    """Brute-force centroid classifier oracle."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(labels))
    cut = int(len(idx) * train_frac)
    tr, te = idx[:cut], idx[cut:]
    classes = np.unique(labels)
    centroids = np.stack([features[tr][labels[tr] == c].mean(axis=0)
                          for c in classes])
    dists = ((features[te][:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(dists, axis=1)]
    return float((pred == labels[te]).mean())


def three_class_spec(seed=0, flows_per_class=60, separation=3.0):
    return GeneratorSpec(
        tasks={"app": ["video", "chat", "mail"]},
        class_labels={"c_video": {"app": "video"},
                      "c_chat": {"app": "chat"},
                      "c_mail": {"app": "mail"}},
        flows_per_class=flows_per_class,
        seed=seed,
        separation=separation,
    )


def test_same_seed_bit_identical():
    a = generate_dataset(three_class_spec(seed=9))
    b = generate_dataset(three_class_spec(seed=9))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels["app"], b.labels["app"])
    c = generate_dataset(three_class_spec(seed=10))
    assert not np.array_equal(a.features, c.features)


def test_centroid_oracle_on_separated_classes():
    ds = generate_dataset(three_class_spec(separation=3.0))
    acc = nearest_centroid_accuracy(ds.features, ds.labels["app"])
    assert acc >= 0.99


def test_feature_invariants_on_every_sample():
    ds = generate_dataset(three_class_spec(flows_per_class=20))
    cfg = ExtractionConfig()
    assert ds.features.shape[1] == cfg.dim
    pay = ds.features[:, :cfg.nb]
    assert np.all(pay >= 0.0) and np.all(pay <= 1.0)
    hdr = ds.features[:, cfg.nb:].reshape(-1, cfg.npkt, 4)
    assert np.all(np.isin(np.round(hdr[:, :, 3], 12), [0.0, 1.0]))


def refinement_spec(seed=0, flows_per_class=10):
    fine = [f"tool{i}" for i in range(4)]
    nesting = {"tool0": "benign", "tool1": "benign",
               "tool2": "malicious", "tool3": "malicious"}
    return GeneratorSpec(
        tasks={"verdict": ["benign", "malicious"], "tool": fine},
        class_labels={f"c{i}": {"verdict": nesting[f"tool{i}"],
                                "tool": f"tool{i}"} for i in range(4)},
        flows_per_class=flows_per_class,
        seed=seed,
        nesting=nesting,
    )


def test_refinement_labels_consistent():
    spec = refinement_spec()
    ds = generate_dataset(spec)
    coarse_map, fine_map = ds.label_maps["verdict"], ds.label_maps["tool"]
    for c_idx, f_idx in zip(ds.labels["verdict"], ds.labels["tool"]):
        assert spec.nesting[fine_map[f_idx]] == coarse_map[c_idx]


def test_inconsistent_nesting_rejected():
    nesting = {"tool0": "malicious", "tool1": "benign",
               "tool2": "malicious", "tool3": "malicious"}
    with pytest.raises(ValueError, match="does not match nesting"):
        GeneratorSpec(
            tasks={"verdict": ["benign", "malicious"],
                   "tool": [f"tool{i}" for i in range(4)]},
            class_labels={"c0": {"verdict": "benign", "tool": "tool0"}},
            nesting=nesting,
        )


def test_round_trip_through_flow_records(tmp_path):
    spec = three_class_spec(flows_per_class=8)
    flows_path = tmp_path / "flows.txt"
    labels_path = tmp_path / "labels.csv"
    direct = emit_files(spec, flows_path, labels_path)
    back = read_flow_records(flows_path)
    ids, mat = flows_to_features(back, spec.extraction)
    assert ids == direct.flow_ids
    assert np.array_equal(mat, direct.features)


def test_generator_config_parsing(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text(
        "[generator]\nseed = 5\nflows_per_class = 7\nseparation = 2.5\n\n"
        "[tasks]\napp = a b\nencap = plain vpn\n\n"
        "[classes]\nc0 = a plain\nc1 = b vpn\n"
    )
    spec = GeneratorSpec.from_config(cfg)
    assert spec.seed == 5
    assert spec.flows_per_class == 7
    assert spec.tasks == {"app": ["a", "b"], "encap": ["plain", "vpn"]}
    ds = generate_dataset(spec)
    assert ds.n_samples == 14
    assert set(ds.task_ids) == {"app", "encap"}
