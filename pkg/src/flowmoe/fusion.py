"""Gated fusion of frozen experts: gates, towers, fine-tuning, inference.

A fused model holds n frozen experts, one gate and one tower per task, and
the task relations that configured them. Gates are per-task mixing vectors
over expert representations: one-hot (default), uniform over a subset
(top-k), or an input-conditioned softmax (trainable). Towers are fresh
two-layer heads [912 -> 256 -> classes]; only towers and trainable gates
learn during fine-tuning.
"""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field

import numpy as np

from . import serial
from .data import LabeledDataset
from .expert import ExpertModel, TrainConfig, expert_representation, load_expert
from .nn import (INPUT_DIM, DropoutStream, MultiAdam, ParamSet, Tensor, backward,
                 cross_entropy, encoder_forward, head_forward, init_gate_linear,
                 init_head, no_grad, seed_streams, softmax, softmax_np)


class GateMode(enum.Enum):
    DEFAULT = "default"
    TOPK = "topk"
    TRAINABLE = "trainable"


class FusionMode(enum.Enum):
    MODE_I = "I"           # attribute-independent tasks
    MODE_II = "II"         # category expansion (label union)
    MODE_III = "III"       # category refinement (coarse -> fine)


@dataclass
class GateConfig:
    task_id: str
    mode: GateMode
    subset: tuple               # expert indices S
    n_experts: int
    fixed_delta: np.ndarray = None   # Default/TopK only
    linear: ParamSet = None          # Trainable only

    def __post_init__(self):
        self.subset = tuple(int(j) for j in self.subset)
        if not self.subset:
            raise ValueError(f"gate {self.task_id!r}: empty expert subset")
        if any(j < 0 or j >= self.n_experts for j in self.subset):
            raise ValueError(f"gate {self.task_id!r}: subset out of range")
        if self.mode is GateMode.DEFAULT and len(self.subset) != 1:
            raise ValueError("default gate needs exactly one expert")
        if self.mode in (GateMode.DEFAULT, GateMode.TOPK):
            delta = np.zeros(self.n_experts)
            delta[list(self.subset)] = 1.0 / len(self.subset)
            self.fixed_delta = delta
            self.linear = None
        else:
            if self.linear is None:
                self.linear = init_gate_linear(len(self.subset))

    @classmethod
    def default(cls, task_id, expert_index, n_experts):
        return cls(task_id, GateMode.DEFAULT, (expert_index,), n_experts)

    @classmethod
    def topk(cls, task_id, subset, n_experts):
        return cls(task_id, GateMode.TOPK, tuple(subset), n_experts)

    @classmethod
    def trainable(cls, task_id, subset, n_experts, linear=None):
        return cls(task_id, GateMode.TRAINABLE, tuple(subset), n_experts,
                   linear=linear)


def gate_weights(gate: GateConfig, x):
    """Mixing vector(s) over all experts; rows sum to 1 and are 0 outside S."""
    if gate.mode is not GateMode.TRAINABLE:
        return gate.fixed_delta.copy()
    x = np.asarray(x, dtype=np.float64)
    logits = x @ gate.linear["w"].data + gate.linear["b"].data
    local = softmax_np(logits)
    if x.ndim == 1:
        delta = np.zeros(gate.n_experts)
        delta[list(gate.subset)] = local
    else:
        delta = np.zeros((x.shape[0], gate.n_experts))
        delta[:, list(gate.subset)] = local
    return delta


def gate_output(gate: GateConfig, stacked, x=None):
    """Combine stacked expert representations (n, 912) into one 912 vector.

    The default mode returns the selected row bit-for-bit; other modes take
    the delta-weighted sum. Trainable gates need the raw input `x`.
    """
    stacked = np.asarray(stacked, dtype=np.float64)
    if stacked.shape[0] != gate.n_experts:
        raise ValueError(f"expected {gate.n_experts} expert rows, "
                         f"got {stacked.shape[0]}")
    if gate.mode is GateMode.DEFAULT:
        return stacked[gate.subset[0]].copy()
    delta = gate_weights(gate, x) if gate.mode is GateMode.TRAINABLE \
        else gate.fixed_delta
    assert np.all(delta >= 0.0)
    assert np.max(np.abs(delta.sum(axis=-1) - 1.0)) < 1e-12
    outside = [j for j in range(gate.n_experts) if j not in gate.subset]
    assert not outside or np.all(delta[..., outside] == 0.0)
    if delta.ndim == 1:
        return np.einsum("n,nd->d", delta, stacked) if stacked.ndim == 2 \
            else np.einsum("n,nbd->bd", delta, stacked)
    return np.einsum("bn,nbd->bd", delta, stacked)


@dataclass
class Tower:
    task_id: str
    params: ParamSet
    n_classes: int
    dropout_rate: float = 0.2


def tower_forward(tower: Tower, gated, train_mode=False, dropout_stream=None):
    """Confidence vector(s): linear -> ReLU -> dropout -> linear -> softmax."""
    gated = np.asarray(gated, dtype=np.float64)
    if gated.shape[-1] != INPUT_DIM:
        raise ValueError(f"expected gated vector of length {INPUT_DIM}, "
                         f"got {gated.shape[-1]}")
    with no_grad():
        logits = head_forward(tower.params, gated, train_mode=train_mode,
                              dropout_stream=dropout_stream,
                              dropout_rate=tower.dropout_rate)
    return softmax_np(logits.data)


@dataclass
class TaskSpec:
    task_id: str
    experts: tuple = ()          # expert indices backing this task's gate
    labels: list = None          # default: taken from the bound expert(s)
    alpha: float = 1.0


@dataclass
class TaskRelation:
    mode: FusionMode
    tasks: list
    nesting: dict = None         # ModeIII: fine label -> coarse label

    def __post_init__(self):
        if self.mode is FusionMode.MODE_II and len(self.tasks) != 1:
            raise ValueError("category expansion fuses into exactly one task")
        if self.mode is FusionMode.MODE_III:
            if len(self.tasks) != 2:
                raise ValueError("category refinement needs (coarse, fine) tasks")
            if not self.nesting:
                raise ValueError("category refinement needs a nesting map")


@dataclass
class FusedModel:
    experts: list
    task_ids: list
    gates: dict
    towers: dict
    relations: list
    label_maps: dict
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for task in self.task_ids:
            self.loss_weights.setdefault(task, 1.0)

    @property
    def input_dim(self):
        return self.experts[0].input_dim if self.experts else INPUT_DIM


def concat_representations(experts, x):
    """Stack expert representations: row j = expert j's encoder output."""
    x = np.asarray(x, dtype=np.float64)
    return np.stack([expert_representation(e, x) for e in experts])


def _union_labels(experts, subset, explicit):
    ordered = []
    for j in subset:
        for name in experts[j].label_map:
            if name not in ordered:
                ordered.append(name)
    if explicit is None:
        return ordered
    explicit = list(explicit)
    missing = [n for n in ordered if n not in explicit]
    if missing:
        raise ValueError(f"inconsistent union map: source labels {missing} "
                         f"missing from the declared union")
    return explicit


def configure_fusion(experts, relations, seed=0, tower_dropout=0.2) -> FusedModel:
    """Build a FusedModel per the declared relations; experts get locked.

    Mode I: one default gate + tower per task, each bound to its expert.
    Mode II: one top-k gate over the sources, tower sized to the label union.
    Mode III: trainable gates for both coarse and fine tasks.
    Towers are freshly initialized with a zeroed output layer.
    """
    if not experts:
        raise ValueError("no experts given")
    if isinstance(relations, TaskRelation):
        relations = [relations]
    n = len(experts)
    gates, towers, label_maps = {}, {}, {}
    task_ids, loss_weights = [], {}
    tower_seeds = iter(seed_streams(seed, sum(len(r.tasks) for r in relations)))

    for relation in relations:
        for spec in relation.tasks:
            if spec.task_id in gates:
                raise ValueError(f"duplicate task {spec.task_id!r}")
            subset = tuple(spec.experts) if spec.experts else None
            if relation.mode is FusionMode.MODE_I:
                if subset is None or len(subset) != 1:
                    raise ValueError(f"task {spec.task_id!r}: independent tasks "
                                     f"bind to exactly one expert")
                labels = list(spec.labels or experts[subset[0]].label_map)
                gate = GateConfig.default(spec.task_id, subset[0], n)
            elif relation.mode is FusionMode.MODE_II:
                if subset is None or len(subset) < 2:
                    raise ValueError(f"task {spec.task_id!r}: category expansion "
                                     f"needs at least two source experts")
                labels = _union_labels(experts, subset, spec.labels)
                gate = GateConfig.topk(spec.task_id, subset, n)
            else:
                subset = subset or tuple(range(n))
                labels = list(spec.labels) if spec.labels else None
                gate = GateConfig.trainable(spec.task_id, subset, n)
            gates[spec.task_id] = gate
            label_maps[spec.task_id] = labels
            task_ids.append(spec.task_id)
            loss_weights[spec.task_id] = spec.alpha

        if relation.mode is FusionMode.MODE_III:
            coarse, fine = relation.tasks[0].task_id, relation.tasks[1].task_id
            if label_maps[coarse] is None:
                label_maps[coarse] = list(experts[relation.tasks[0].experts[0]]
                                          .label_map) \
                    if relation.tasks[0].experts else None
            if label_maps[fine] is None:
                label_maps[fine] = list(relation.nesting)
            if label_maps[coarse] is None:
                raise ValueError(f"task {coarse!r}: no label map available")
            _check_nesting(label_maps[coarse], label_maps[fine], relation.nesting)

    for relation in relations:
        for spec in relation.tasks:
            labels = label_maps[spec.task_id]
            rng = np.random.default_rng(next(tower_seeds))
            towers[spec.task_id] = Tower(
                task_id=spec.task_id,
                params=init_head(rng, len(labels), zero_output=True),
                n_classes=len(labels),
                dropout_rate=tower_dropout)

    for expert in experts:
        expert.freeze()
    return FusedModel(experts=list(experts), task_ids=task_ids, gates=gates,
                      towers=towers, relations=list(relations),
                      label_maps=label_maps, loss_weights=loss_weights)


def _check_nesting(coarse_labels, fine_labels, nesting):
    missing = [f for f in fine_labels if f not in nesting]
    bad_parent = [f for f, c in nesting.items() if c not in coarse_labels]
    if missing or bad_parent:
        raise ValueError(
            "non-nested label maps: "
            + (f"fine labels {missing} have no coarse parent; " if missing else "")
            + (f"parents of {bad_parent} are not coarse labels" if bad_parent else ""))


def default_finetune_config(mode: FusionMode, seed=0) -> TrainConfig:
    """Scenario fine-tune defaults: batch 128; lr 1e-4 for independent-task
    fusion, 1e-3 otherwise."""
    lr = 1e-4 if mode is FusionMode.MODE_I else 1e-3
    epochs = 5 if mode is FusionMode.MODE_I else 10
    return TrainConfig(learning_rate=lr, batch_size=128, epochs=epochs,
                       dropout_rate=0.0, seed=seed)


def _stacked_train_reps(model, X):
    return [encoder_forward(e.encoder, X) for e in model.experts]


def _gate_tensor_output(gate, reps, x_tensor):
    if gate.mode is GateMode.DEFAULT:
        return reps[gate.subset[0]]
    if gate.mode is GateMode.TOPK:
        out = None
        w = 1.0 / len(gate.subset)
        for j in gate.subset:
            term = reps[j] * w
            out = term if out is None else out + term
        return out
    logits = x_tensor @ gate.linear["w"] + gate.linear["b"]
    delta = softmax(logits)            # (B, |S|)
    b = x_tensor.data.shape[0]
    out = None
    for pos, j in enumerate(gate.subset):
        term = delta.select(pos, axis=1).reshape(b, 1) * reps[j]
        out = term if out is None else out + term
    return out


def fine_tune(model: FusedModel, data: LabeledDataset, cfg: TrainConfig = None,
              unfreeze_experts=False):
    """Fine-tune towers (and trainable gates) with frozen experts.

    The per-batch loss is the alpha-weighted sum of one cross-entropy per
    task; gradients for task k touch only tower k (and the shared gates /
    experts when trainable). Returns (model, per-epoch loss traces).
    """
    if cfg is None:
        cfg = default_finetune_config(model.relations[0].mode)
    missing = [t for t in model.task_ids if t not in data.labels]
    if missing:
        raise ValueError(f"dataset lacks labels for task(s) {missing}")
    for task in model.task_ids:
        if list(data.label_maps[task]) != list(model.label_maps[task]):
            raise ValueError(f"task {task!r}: dataset label map does not match "
                             f"the fused model's")

    shuffle_seed, drop_seed = seed_streams(cfg.seed, 2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    stream = DropoutStream(drop_seed)

    named_sets = {}
    for task, tower in model.towers.items():
        tower.params.unfreeze()
        named_sets[f"tower.{task}"] = tower.params
    for task, gate in model.gates.items():
        if gate.mode is GateMode.TRAINABLE:
            gate.linear.unfreeze()
            named_sets[f"gate.{task}"] = gate.linear
    if unfreeze_experts:
        for i, expert in enumerate(model.experts):
            expert.encoder.unfreeze()
            named_sets[f"expert{i}"] = expert.encoder
    opt = MultiAdam(named_sets)

    feats = data.features
    m = feats.shape[0]
    if not unfreeze_experts:
        # frozen experts make the representations constant: compute once
        cached = [expert_representation(e, feats) for e in model.experts]
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(m)
        totals = {task: 0.0 for task in model.task_ids}
        total_all = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            X = feats[idx]
            x_tensor = Tensor(X)
            if unfreeze_experts:
                reps = _stacked_train_reps(model, X)
            else:
                reps = [Tensor(r[idx]) for r in cached]
            loss_total = None
            batch_losses = {}
            for task in model.task_ids:
                gated = _gate_tensor_output(model.gates[task], reps, x_tensor)
                tower = model.towers[task]
                logits = head_forward(tower.params, gated, train_mode=True,
                                      dropout_stream=stream,
                                      dropout_rate=tower.dropout_rate)
                task_loss = cross_entropy(softmax(logits), data.labels[task][idx])
                batch_losses[task] = task_loss.item()
                weighted = task_loss * model.loss_weights[task]
                loss_total = weighted if loss_total is None else loss_total + weighted
            grads = backward(loss_total, *named_sets.values())
            if len(named_sets) == 1:
                grads = (grads,)
            opt.apply(dict(zip(named_sets, grads)), cfg.learning_rate)
            w = len(idx)
            for task, value in batch_losses.items():
                totals[task] += value * w
            total_all += loss_total.item() * w
        row = {"total": total_all / m}
        row.update({task: totals[task] / m for task in model.task_ids})
        trace.append(row)
    for expert in model.experts:
        expert.freeze()
    return model, trace


@dataclass
class TaskPrediction:
    label_index: int
    label: str
    confidences: np.ndarray


def classify_batch(model: FusedModel, X):
    """One shared expert pass, then per-task gate -> tower -> argmax."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.input_dim:
        raise ValueError(f"expected input of length {model.input_dim}, "
                         f"got {X.shape[1]}")
    stacked = concat_representations(model.experts, X)    # (n, B, 912)
    out = {}
    for task in model.task_ids:
        gated = gate_output(model.gates[task], stacked, X)
        probs = tower_forward(model.towers[task], gated)
        out[task] = (np.argmax(probs, axis=1), probs)
    return out


def classify(model: FusedModel, x):
    """Per-task attribute values for one flow; ties break to the lowest index."""
    batch = classify_batch(model, np.asarray(x, dtype=np.float64))
    result = {}
    for task, (indices, probs) in batch.items():
        idx = int(indices[0])
        result[task] = TaskPrediction(label_index=idx,
                                      label=model.label_maps[task][idx],
                                      confidences=probs[0])
    return result


# -- persistence -------------------------------------------------------------

def save_fused(model: FusedModel, path):
    relations = []
    for rel in model.relations:
        relations.append({
            "mode": rel.mode.value,
            "tasks": [{"task_id": t.task_id, "experts": list(t.experts),
                       "labels": model.label_maps[t.task_id],
                       "alpha": model.loss_weights[t.task_id]}
                      for t in rel.tasks],
            "nesting": rel.nesting,
        })
    header = {
        "kind": "fused",
        "task_ids": model.task_ids,
        "label_maps": model.label_maps,
        "loss_weights": model.loss_weights,
        "relations": relations,
        "experts": [{"id": e.id, "task_id": e.task_id,
                     "input_dim": e.input_dim, "label_map": list(e.label_map)}
                    for e in model.experts],
        "gates": [{"task_id": t, "mode": g.mode.value, "subset": list(g.subset)}
                  for t, g in model.gates.items()],
        "towers": [{"task_id": t, "n_classes": tw.n_classes,
                    "dropout_rate": tw.dropout_rate}
                   for t, tw in model.towers.items()],
    }
    tensors = []
    for i, e in enumerate(model.experts):
        tensors += [(f"expert{i}.encoder.{n}", t.data) for n, t in e.encoder.items()]
        tensors += [(f"expert{i}.head.{n}", t.data) for n, t in e.head.items()]
    for task, gate in model.gates.items():
        if gate.mode is GateMode.TRAINABLE:
            tensors += [(f"gate.{task}.{n}", t.data) for n, t in gate.linear.items()]
    for task, tower in model.towers.items():
        tensors += [(f"tower.{task}.{n}", t.data) for n, t in tower.params.items()]
    serial.save_container(path, serial.MODEL_MAGIC, header, tensors)


def load_fused(path) -> FusedModel:
    header, tensors = serial.load_container(path, serial.MODEL_MAGIC)
    if header.get("kind") != "fused":
        raise ValueError(f"{path}: not a fused model file "
                         f"(kind={header.get('kind')!r})")

    def collect(prefix):
        ps = ParamSet()
        plen = len(prefix)
        for name, _ in header["tensors"]:
            if name.startswith(prefix):
                ps.add(name[plen:], tensors[name])
        return ps

    experts = []
    for i, meta in enumerate(header["experts"]):
        experts.append(ExpertModel(id=meta["id"],
                                   encoder=collect(f"expert{i}.encoder."),
                                   head=collect(f"expert{i}.head."),
                                   label_map=list(meta["label_map"]),
                                   input_dim=int(meta["input_dim"]),
                                   task_id=meta.get("task_id", "")))
        experts[-1].freeze()
    n = len(experts)
    gates = {}
    for meta in header["gates"]:
        mode = GateMode(meta["mode"])
        linear = collect(f"gate.{meta['task_id']}.") \
            if mode is GateMode.TRAINABLE else None
        gates[meta["task_id"]] = GateConfig(meta["task_id"], mode,
                                            tuple(meta["subset"]), n,
                                            linear=linear or None)
    towers = {}
    for meta in header["towers"]:
        towers[meta["task_id"]] = Tower(task_id=meta["task_id"],
                                        params=collect(f"tower.{meta['task_id']}."),
                                        n_classes=int(meta["n_classes"]),
                                        dropout_rate=float(meta["dropout_rate"]))
    relations = []
    for rel in header["relations"]:
        tasks = [TaskSpec(task_id=t["task_id"], experts=tuple(t["experts"]),
                          labels=t["labels"], alpha=t["alpha"])
                 for t in rel["tasks"]]
        relations.append(TaskRelation(mode=FusionMode(rel["mode"]), tasks=tasks,
                                      nesting=rel["nesting"]))
    return FusedModel(experts=experts, task_ids=list(header["task_ids"]),
                      gates=gates, towers=towers, relations=relations,
                      label_maps={k: list(v) for k, v in header["label_maps"].items()},
                      loss_weights=dict(header["loss_weights"]))


# -- declarative fusion config ------------------------------------------------

def load_fusion_config(path):
    """Parse the INI fusion config into (expert_paths, relations, options).

    Sections: [experts] files = <paths>; [fusion] mode/seed/lr/epochs/
    batch_size/dropout; one [task:<id>] per task (experts = indices,
    labels/alpha optional); [nesting] for refinement.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ValueError(f"cannot read fusion config {path}")
    if "experts" not in cp or "files" not in cp["experts"]:
        raise ValueError(f"{path}: missing [experts] files = ...")
    expert_paths = cp["experts"]["files"].split()
    fu = cp["fusion"] if "fusion" in cp else {}
    try:
        mode = FusionMode(fu.get("mode", "I").strip().upper())
    except ValueError:
        raise ValueError(f"{path}: unknown fusion mode {fu.get('mode')!r}") from None

    tasks = []
    for section in cp.sections():
        if not section.startswith("task:"):
            continue
        body = cp[section]
        tasks.append(TaskSpec(
            task_id=section[5:],
            experts=tuple(int(i) for i in body.get("experts", "").split()),
            labels=body["labels"].split() if "labels" in body else None,
            alpha=float(body.get("alpha", 1.0)),
        ))
    if not tasks:
        raise ValueError(f"{path}: no [task:...] sections")
    nesting = dict(cp["nesting"]) if "nesting" in cp else None
    relation = TaskRelation(mode=mode, tasks=tasks, nesting=nesting)

    options = {"seed": int(fu.get("seed", 0))}
    cfg = default_finetune_config(mode, seed=options["seed"])
    if "lr" in fu:
        cfg.learning_rate = float(fu["lr"])
    if "epochs" in fu:
        cfg.epochs = int(fu["epochs"])
    if "batch_size" in fu:
        cfg.batch_size = int(fu["batch_size"])
    options["tower_dropout"] = float(fu.get("dropout", 0.0))
    options["unfreeze_experts"] = fu.get("unfreeze_experts", "no").lower() \
        in ("1", "yes", "true")
    options["train_config"] = cfg
    return expert_paths, relation, options


def load_any_model(path):
    """Open either an expert or a fused model file, returning (kind, model)."""
    header, _ = serial.load_container(path, serial.MODEL_MAGIC)
    kind = header.get("kind")
    if kind == "expert":
        return "expert", load_expert(path)
    if kind == "fused":
        return "fused", load_fused(path)
    raise ValueError(f"{path}: unknown model kind {kind!r}")
