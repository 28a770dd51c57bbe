"""Gate contracts, fusion configuration, fine-tuning, and inference."""

import numpy as np
import pytest

from flowmoe.expert import expert_representation
from flowmoe.fusion import (FusionMode, GateConfig, GateMode, TaskRelation,
                            TaskSpec, Tower, classify, classify_batch,
                            concat_representations, configure_fusion, fine_tune,
                            gate_output, gate_weights, load_fused,
                            load_fusion_config, save_fused, tower_forward)
from flowmoe.nn import INPUT_DIM, backward, cross_entropy, head_forward, init_head, softmax
from flowmoe.nn import Tensor


def test_gate_default_bit_equal(rng):
    stacked = rng.normal(size=(2, INPUT_DIM))
    gate = GateConfig.default("t", 1, 2)
    out = gate_output(gate, stacked)
    assert np.array_equal(out, stacked[1])


def test_gate_topk_mean(rng):
    stacked = rng.normal(size=(2, INPUT_DIM))
    gate = GateConfig.topk("t", (0, 1), 2)
    out = gate_output(gate, stacked)
    assert np.max(np.abs(out - stacked.mean(axis=0))) < 1e-12


def test_gate_topk_subset_weights():
    gate = GateConfig.topk("t", (0, 2), 4)
    assert np.allclose(gate.fixed_delta, [0.5, 0.0, 0.5, 0.0])
    assert gate.fixed_delta.sum() == 1.0


def test_gate_trainable_uniform_at_zero_init(rng):
    x = rng.normal(size=INPUT_DIM)
    stacked = rng.normal(size=(3, INPUT_DIM))
    gate = GateConfig.trainable("t", (0, 1, 2), 3)
    delta = gate_weights(gate, x)
    assert np.allclose(delta, 1.0 / 3.0)
    out = gate_output(gate, stacked, x)
    assert np.allclose(out, stacked.mean(axis=0), atol=1e-12)


def test_gate_trainable_simplex_support(rng):
    gate = GateConfig.trainable("t", (1, 3), 5)
    gate.linear["w"].data = rng.normal(size=gate.linear["w"].data.shape)
    for _ in range(20):
        delta = gate_weights(gate, rng.normal(size=INPUT_DIM))
        assert np.all(delta >= 0)
        assert abs(delta.sum() - 1.0) < 1e-12
        assert delta[0] == delta[2] == delta[4] == 0.0


def test_gate_empty_subset_rejected():
    with pytest.raises(ValueError, match="empty"):
        GateConfig("t", GateMode.TOPK, (), 2)


def test_gate_linearity_superposition(rng):
    gate = GateConfig.topk("t", (0, 1, 2), 3)
    a = rng.normal(size=(3, INPUT_DIM))
    b = rng.normal(size=(3, INPUT_DIM))
    lhs = gate_output(gate, 2.0 * a + 3.0 * b)
    rhs = 2.0 * gate_output(gate, a) + 3.0 * gate_output(gate, b)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_concat_representations_rows(trained_experts, two_task_data, rng):
    app, encap = trained_experts
    x = two_task_data[2].features[0]
    single = concat_representations([app], x)
    assert single.shape == (1, INPUT_DIM)
    assert np.array_equal(single[0], expert_representation(app, x))
    stacked = concat_representations([app, encap], x)
    assert stacked.shape == (2, INPUT_DIM)
    assert np.array_equal(stacked[0], expert_representation(app, x))
    assert np.array_equal(stacked[1], expert_representation(encap, x))
    # permuting experts permutes rows
    swapped = concat_representations([encap, app], x)
    assert np.array_equal(swapped[0], stacked[1])
    assert np.array_equal(swapped[1], stacked[0])


def test_tower_forward_contract(rng):
    tower = Tower("t", init_head(rng, 4), n_classes=4, dropout_rate=0.0)
    out = tower_forward(tower, rng.normal(size=INPUT_DIM))
    assert out.shape == (4,)
    assert abs(out.sum() - 1.0) < 1e-9
    again = tower_forward(tower, np.zeros(INPUT_DIM))
    assert np.array_equal(again, tower_forward(tower, np.zeros(INPUT_DIM)))
    with pytest.raises(ValueError):
        tower_forward(tower, np.zeros(64))


def _mode1_relation():
    return TaskRelation(mode=FusionMode.MODE_I,
                        tasks=[TaskSpec("app", experts=(0,)),
                               TaskSpec("encap", experts=(1,))])


def test_configure_mode1(trained_experts):
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=1)
    assert fused.task_ids == ["app", "encap"]
    assert all(g.mode is GateMode.DEFAULT for g in fused.gates.values())
    assert fused.towers["app"].n_classes == 3
    assert fused.towers["encap"].n_classes == 2
    assert all(e.encoder.frozen for e in fused.experts)


def test_configure_mode2_union_count(trained_experts):
    app, encap = trained_experts
    rel = TaskRelation(mode=FusionMode.MODE_II,
                       tasks=[TaskSpec("joint", experts=(0, 1))])
    fused = configure_fusion([app, encap], rel, seed=1)
    union = fused.label_maps["joint"]
    # oracle: union of the two label maps, first-expert order first
    expected = list(app.label_map) + [n for n in encap.label_map
                                      if n not in app.label_map]
    assert union == expected
    assert fused.towers["joint"].n_classes == len(expected)
    assert fused.gates["joint"].mode is GateMode.TOPK


def test_configure_mode2_rejects_bad_union(trained_experts):
    rel = TaskRelation(mode=FusionMode.MODE_II,
                       tasks=[TaskSpec("joint", experts=(0, 1),
                                       labels=["video", "chat"])])
    with pytest.raises(ValueError, match="union"):
        configure_fusion(list(trained_experts), rel, seed=1)


def test_configure_mode3_shapes(trained_experts):
    app, encap = trained_experts
    nesting = {"video": "plain", "chat": "vpn", "mail": "plain"}
    rel = TaskRelation(mode=FusionMode.MODE_III, nesting=nesting,
                       tasks=[TaskSpec("encap", experts=(1,),
                                       labels=["plain", "vpn"]),
                              TaskSpec("app", labels=["video", "chat", "mail"])])
    fused = configure_fusion([app, encap], rel, seed=1)
    assert fused.gates["encap"].mode is GateMode.TRAINABLE
    assert fused.gates["app"].mode is GateMode.TRAINABLE
    assert fused.gates["app"].subset == (0, 1)
    assert fused.towers["encap"].n_classes == 2
    assert fused.towers["app"].n_classes == 3


def test_configure_mode3_rejects_non_nested(trained_experts):
    rel = TaskRelation(mode=FusionMode.MODE_III,
                       nesting={"video": "nosuch"},
                       tasks=[TaskSpec("encap", experts=(1,),
                                       labels=["plain", "vpn"]),
                              TaskSpec("app", labels=["video"])])
    with pytest.raises(ValueError, match="non-nested"):
        configure_fusion(list(trained_experts), rel, seed=1)


def test_classify_matches_standalone_path(trained_experts, two_task_data):
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=2)
    test = two_task_data[2]
    for i in range(5):
        x = test.features[i]
        result = classify(fused, x)
        assert set(result) == {"app", "encap"}
        for task, expert in (("app", fused.experts[0]),
                             ("encap", fused.experts[1])):
            rep = expert_representation(expert, x)
            probs = tower_forward(fused.towers[task], rep)
            assert np.argmax(probs) == result[task].label_index
            assert np.allclose(probs, result[task].confidences, atol=1e-15)
            assert abs(result[task].confidences.sum() - 1.0) < 1e-9


def test_classify_batch_equals_per_sample(trained_experts, two_task_data):
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=2)
    X = two_task_data[2].features[:8]
    batch = classify_batch(fused, X)
    for i in range(8):
        single = classify(fused, X[i])
        for task in fused.task_ids:
            assert batch[task][0][i] == single[task].label_index
            assert np.allclose(batch[task][1][i], single[task].confidences,
                               atol=1e-15)


def test_fine_tune_freezes_experts_and_isolates_tasks(trained_experts,
                                                      two_task_data):
    from flowmoe.expert import TrainConfig
    train = two_task_data[0]
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=3,
                             tower_dropout=0.0)
    before = [e.encoder.state_dict() for e in fused.experts]
    before_heads = [e.head.state_dict() for e in fused.experts]
    cfg = TrainConfig(learning_rate=1e-4, batch_size=32, epochs=2,
                      dropout_rate=0.0, seed=1)
    fused, trace = fine_tune(fused, train, cfg)
    assert len(trace) == 2
    assert trace[1]["total"] < trace[0]["total"]
    for expert, enc, head in zip(fused.experts, before, before_heads):
        for name, arr in enc.items():
            assert np.array_equal(expert.encoder[name].data, arr)
        for name, arr in head.items():
            assert np.array_equal(expert.head[name].data, arr)

    # task isolation at the literal gradient level
    reps = concat_representations(fused.experts, train.features[:16])
    x = train.features[:16]
    app_tower, enc_tower = fused.towers["app"], fused.towers["encap"]
    app_tower.params.unfreeze()
    enc_tower.params.unfreeze()
    gated = gate_output(fused.gates["app"], reps, x)
    loss = cross_entropy(softmax(head_forward(app_tower.params, Tensor(gated))),
                         train.labels["app"][:16])
    app_grads, enc_grads = backward(loss, app_tower.params, enc_tower.params)
    assert set(app_grads) == set(app_tower.params.names())
    assert enc_grads == {}


def test_fine_tune_rejects_missing_task(trained_experts, two_task_data):
    train = two_task_data[0]
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=3)
    only_app = train.single_task("app")
    with pytest.raises(ValueError, match="encap"):
        fine_tune(fused, only_app)


def test_fine_tune_unfreeze_experts_updates_encoders(trained_experts,
                                                     two_task_data):
    from flowmoe.expert import TrainConfig
    train = two_task_data[0].subset(np.arange(64))
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=3,
                             tower_dropout=0.0)
    before = fused.experts[0].encoder.state_dict()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=1,
                      dropout_rate=0.0, seed=1)
    fused, _ = fine_tune(fused, train, cfg, unfreeze_experts=True)
    changed = any(not np.array_equal(fused.experts[0].encoder[n].data, arr)
                  for n, arr in before.items())
    assert changed
    assert fused.experts[0].encoder.frozen  # re-locked afterwards


def test_fused_round_trip(tmp_path, trained_experts, two_task_data):
    from flowmoe.expert import TrainConfig
    train, _va, test = two_task_data
    fused = configure_fusion(list(trained_experts), _mode1_relation(), seed=3,
                             tower_dropout=0.0)
    fused, _ = fine_tune(fused, train,
                         TrainConfig(learning_rate=1e-4, batch_size=32,
                                     epochs=1, dropout_rate=0.0, seed=2))
    path = tmp_path / "fused.snke"
    save_fused(fused, path)
    loaded = load_fused(path)
    a = classify_batch(fused, test.features[:10])
    b = classify_batch(loaded, test.features[:10])
    for task in fused.task_ids:
        assert np.array_equal(a[task][0], b[task][0])
        assert np.array_equal(a[task][1], b[task][1])
    assert loaded.relations[0].mode is FusionMode.MODE_I
    assert loaded.label_maps == fused.label_maps


def test_per_mode_finetune_defaults():
    from flowmoe.fusion import default_finetune_config
    mode1 = default_finetune_config(FusionMode.MODE_I)
    assert (mode1.learning_rate, mode1.batch_size, mode1.epochs) == (1e-4, 128, 5)
    for mode in (FusionMode.MODE_II, FusionMode.MODE_III):
        cfg = default_finetune_config(mode)
        assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (1e-3, 128, 10)


def test_tower_default_dropout(rng):
    tower = Tower("t", init_head(rng, 2), n_classes=2)
    assert tower.dropout_rate == 0.2


def test_fusion_config_parsing(tmp_path):
    cfg = tmp_path / "fusion.cfg"
    cfg.write_text(
        "[experts]\nfiles = a.snke b.snke\n\n"
        "[fusion]\nmode = III\nseed = 4\nlr = 5e-4\nepochs = 3\n\n"
        "[task:verdict]\nexperts = 0 1\nlabels = benign malicious\n\n"
        "[task:tool]\nlabels = t0 t1\nalpha = 0.5\n\n"
        "[nesting]\nt0 = benign\nt1 = malicious\n"
    )
    paths, relation, options = load_fusion_config(cfg)
    assert paths == ["a.snke", "b.snke"]
    assert relation.mode is FusionMode.MODE_III
    assert relation.tasks[1].alpha == 0.5
    assert relation.nesting == {"t0": "benign", "t1": "malicious"}
    assert options["train_config"].learning_rate == 5e-4
    assert options["train_config"].epochs == 3
    assert options["train_config"].seed == 4
