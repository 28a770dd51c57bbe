"""Labeled flow datasets and the flow_id,task_id,label CSV format."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class LabeledDataset:
    """Feature matrix plus one integer label per declared task per sample."""

    features: np.ndarray                # (m, dim)
    labels: dict                        # task_id -> (m,) int array
    label_maps: dict                    # task_id -> [class names in index order]
    flow_ids: list

    def __post_init__(self):
        m = self.features.shape[0]
        if len(self.flow_ids) != m:
            raise ValueError("flow id count does not match feature rows")
        for task, arr in self.labels.items():
            if arr.shape != (m,):
                raise ValueError(f"task {task!r}: label count mismatch")
            k = len(self.label_maps[task])
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"task {task!r}: label index out of range")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def task_ids(self):
        return list(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx],
            labels={t: a[idx] for t, a in self.labels.items()},
            label_maps=dict(self.label_maps),
            flow_ids=[self.flow_ids[i] for i in idx],
        )

    def single_task(self, task_id) -> "LabeledDataset":
        return LabeledDataset(
            features=self.features,
            labels={task_id: self.labels[task_id]},
            label_maps={task_id: self.label_maps[task_id]},
            flow_ids=self.flow_ids,
        )

    def class_counts(self, task_id):
        k = len(self.label_maps[task_id])
        return np.bincount(self.labels[task_id], minlength=k)


def write_labels_csv(path, flow_ids, labels_by_task):
    """labels_by_task: task_id -> list of label names aligned with flow_ids."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["flow_id", "task_id", "label"])
        for task in labels_by_task:
            names = labels_by_task[task]
            for fid, name in zip(flow_ids, names):
                w.writerow([fid, task, name])


def load_labels_csv(path):
    """Returns task_id -> {flow_id: label_name}."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"flow_id", "task_id", "label"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected columns flow_id,task_id,label")
        for row in reader:
            out.setdefault(row["task_id"], {})[row["flow_id"]] = row["label"]
    return out


def build_dataset(flow_ids, features, labels_by_task, label_maps=None,
                  tasks=None) -> LabeledDataset:
    """Join features with label assignments into a LabeledDataset.

    When `label_maps` is given the class index order is taken from it
    (samples with labels outside the map are rejected); otherwise maps are
    the sorted distinct names per task. Only `tasks` (default: all in the
    CSV) are kept, and every kept task must label every flow id.
    """
    selected = list(tasks) if tasks is not None else list(labels_by_task)
    maps = {}
    idx_labels = {}
    for task in selected:
        if task not in labels_by_task:
            raise ValueError(f"no labels for task {task!r}")
        assignment = labels_by_task[task]
        missing = [fid for fid in flow_ids if fid not in assignment]
        if missing:
            raise ValueError(f"task {task!r}: {len(missing)} flow(s) unlabeled "
                             f"(first: {missing[0]})")
        if label_maps is not None and task in label_maps:
            names = list(label_maps[task])
        else:
            names = sorted(set(assignment[fid] for fid in flow_ids))
        index = {name: i for i, name in enumerate(names)}
        try:
            idx_labels[task] = np.array([index[assignment[fid]]
                                         for fid in flow_ids], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"task {task!r}: label {exc} not in label map") from exc
        maps[task] = names
    return LabeledDataset(features=np.asarray(features, dtype=np.float64),
                          labels=idx_labels, label_maps=maps,
                          flow_ids=list(flow_ids))
