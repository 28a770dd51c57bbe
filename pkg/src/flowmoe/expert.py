"""Per-task expert models: a shared transformer encoder plus a private head.

Experts are trained standalone on one task; fusion later reads only the
encoder, so the classification head never leaves this module's files.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import serial
from .data import LabeledDataset
from .nn import (INPUT_DIM, DropoutStream, MultiAdam, ParamSet, backward,
                 cross_entropy, encoder_forward, eval_forward, head_forward,
                 init_encoder, init_head, no_grad, seed_streams, softmax,
                 softmax_np)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Expert training hyperparameters (defaults: lr 1e-3, dropout 0.2,
    batch 32, 50 epochs)."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float = float("nan")
    val_acc: float = float("nan")


@dataclass
class ExpertModel:
    id: str
    encoder: ParamSet
    head: ParamSet
    label_map: list
    input_dim: int = INPUT_DIM
    task_id: str = ""

    @property
    def n_target(self):
        return len(self.label_map)

    def freeze(self):
        self.encoder.freeze()
        self.head.freeze()

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input of length {self.input_dim}, "
                             f"got {x.shape[-1]}")
        return x


def train_expert(data: LabeledDataset, cfg: TrainConfig, val_data=None,
                 task_id=None, expert_id=None):
    """Train encoder + head with cross-entropy; returns (model, epoch trace).

    `data` must carry exactly one task unless `task_id` picks one. A task
    whose training split holds fewer than two distinct classes is rejected.
    """
    if task_id is None:
        if len(data.task_ids) != 1:
            raise ValueError("dataset has several tasks; pass task_id")
        task_id = data.task_ids[0]
    labels = data.labels[task_id]
    label_map = data.label_maps[task_id]
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError(f"degenerate task {task_id!r}: needs >= 2 classes, "
                         f"found {present.size}")
    counts = data.class_counts(task_id)
    if np.any(counts == 0):
        log.warning("task %s: %d declared class(es) without samples",
                    task_id, int((counts == 0).sum()))

    init_seed, shuffle_seed, drop_seed = seed_streams(cfg.seed, 3)
    rng = np.random.default_rng(init_seed)
    encoder = init_encoder(rng)
    head = init_head(rng, len(label_map))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    stream = DropoutStream(drop_seed)
    opt = MultiAdam({"encoder": encoder, "head": head})

    model = ExpertModel(id=expert_id or task_id, encoder=encoder, head=head,
                        label_map=list(label_map), task_id=task_id)
    feats = data.features
    m = feats.shape[0]
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rep = encoder_forward(encoder, feats[idx], train_mode=True,
                                  dropout_stream=stream,
                                  dropout_rate=cfg.dropout_rate)
            logits = head_forward(head, rep, train_mode=True,
                                  dropout_stream=stream,
                                  dropout_rate=cfg.dropout_rate)
            loss = cross_entropy(softmax(logits), labels[idx])
            enc_g, head_g = backward(loss, encoder, head)
            opt.apply({"encoder": enc_g, "head": head_g}, cfg.learning_rate)
            total += loss.item() * len(idx)
        stats = EpochStats(epoch=epoch, train_loss=total / m)
        if not np.isfinite(stats.train_loss):
            raise ArithmeticError(f"non-finite training loss at epoch {epoch}")
        if val_data is not None:
            stats.val_loss, stats.val_acc = _evaluate_split(
                model, val_data, task_id)
        trace.append(stats)
    return model, trace


def _evaluate_split(model, data, task_id):
    probs = expert_predict(model, data.features)
    labels = data.labels[task_id]
    loss = cross_entropy(probs, labels)
    acc = float((np.argmax(probs, axis=1) == labels).mean())
    return loss, acc


def expert_representation(model: ExpertModel, x):
    """Encoder output in eval mode: the representation shared into fusion."""
    x = model._check_input(x)
    return eval_forward(encoder_forward, model.encoder, x)


def expert_predict(model: ExpertModel, x):
    """Class probability vector(s) from the full encoder + head forward."""
    x = model._check_input(x)
    with no_grad():
        rep = encoder_forward(model.encoder, x)
        logits = head_forward(model.head, rep)
    return softmax_np(logits.data)


def write_loss_trace(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for s in trace:
            w.writerow([s.epoch, repr(s.train_loss),
                        "" if np.isnan(s.val_loss) else repr(s.val_loss),
                        "" if np.isnan(s.val_acc) else repr(s.val_acc)])


def save_expert(model: ExpertModel, path):
    header = {"kind": "expert", "id": model.id, "task_id": model.task_id,
              "input_dim": model.input_dim, "n_target": model.n_target,
              "label_map": list(model.label_map)}
    tensors = [(f"encoder.{n}", t.data) for n, t in model.encoder.items()]
    tensors += [(f"head.{n}", t.data) for n, t in model.head.items()]
    serial.save_container(path, serial.MODEL_MAGIC, header, tensors)


def load_expert(path) -> ExpertModel:
    header, tensors = serial.load_container(path, serial.MODEL_MAGIC)
    if header.get("kind") != "expert":
        raise ValueError(f"{path}: not an expert model file "
                         f"(kind={header.get('kind')!r})")
    encoder, head = ParamSet(), ParamSet()
    for name, _shape in header["tensors"]:
        section, pname = name.split(".", 1)
        target = encoder if section == "encoder" else head
        target.add(pname, tensors[name])
    return ExpertModel(id=header["id"], encoder=encoder, head=head,
                       label_map=list(header["label_map"]),
                       input_dim=int(header["input_dim"]),
                       task_id=header.get("task_id", ""))
