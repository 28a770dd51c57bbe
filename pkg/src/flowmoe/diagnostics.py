"""Convergence-bound checking and trainable-gate anomaly detection.

The bound checker targets full-batch plain gradient descent on the towers
of a fused model (frozen experts, fixed gates): with learning rate
alpha <= 1/c the loss must never increase, and the gap to the best iterate
must stay under curve(T) = 1 / (T * z * alpha * (1 - c*alpha/2)). The true
optimum is unknowable, so the best recorded iterate stands in for it and
the reported z is a proxy built from distances to that iterate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .nn import Tensor, backward, cross_entropy, head_forward, softmax

log = logging.getLogger(__name__)

FULL_BATCH_GD = "full-batch-gd"


@dataclass
class LossTrace:
    losses: np.ndarray
    alpha: float
    method: str = FULL_BATCH_GD

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.ndim != 1:
            raise ValueError("loss trace must be one-dimensional")

    @property
    def steps(self):
        return self.losses.size


@dataclass
class ConvergenceReport:
    verdict: str                     # PASS | VIOLATION | ASSUMPTIONS-NOT-MET
    c_hat: float = None
    z_hat: float = None
    alpha: float = None
    violations: list = field(default_factory=list)
    gap: np.ndarray = None           # per step, vs the best iterate
    bound: np.ndarray = None         # per step (index 0 unused)
    bound_checked: bool = False
    notes: list = field(default_factory=list)

    def summary(self):
        lines = [f"verdict: {self.verdict}",
                 f"alpha: {self.alpha}", f"c_hat: {self.c_hat}",
                 f"z_hat: {self.z_hat}",
                 f"loss increases at steps: {self.violations or 'none'}",
                 f"bound checked: {self.bound_checked}"]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def estimate_lipschitz(grad_fn, snapshots):
    """max over snapshot pairs of |grad(w1) - grad(w2)| / |w1 - w2|.

    A lower bound on the true Lipschitz constant of the gradient; adding
    snapshots can only raise it. Identical pairs are skipped; all-identical
    snapshots are an error.
    """
    snaps = [np.asarray(s, dtype=np.float64).ravel() for s in snapshots]
    if len(snaps) < 2:
        raise ValueError("need at least two parameter snapshots")
    grads = [np.asarray(grad_fn(s), dtype=np.float64).ravel() for s in snaps]
    best = 0.0
    seen_distinct = False
    for i in range(len(snaps)):
        for j in range(i + 1, len(snaps)):
            dw = np.linalg.norm(snaps[i] - snaps[j])
            if dw == 0.0:
                continue
            seen_distinct = True
            dg = np.linalg.norm(grads[i] - grads[j])
            best = max(best, dg / dw)
    if not seen_distinct:
        raise ValueError("all parameter snapshots are identical")
    return best


def _loss_increases(losses):
    out = []
    for t in range(1, len(losses)):
        tol = 1e-12 * max(1.0, abs(losses[t - 1]))
        if losses[t] > losses[t - 1] + tol:
            out.append(t)
    return out


def check_convergence(trace: LossTrace, c_hat=None, snapshots=None,
                      snapshot_steps=None) -> ConvergenceReport:
    """Verify the plain-GD convergence guarantees against a recorded run.

    Traces from other optimizers are reported as ASSUMPTIONS-NOT-MET with
    the monotonicity statistics still filled in. For full-batch GD with
    alpha <= 1/c_hat, any loss increase or a gap above the bound curve is a
    VIOLATION.
    """
    if trace.steps == 0:
        raise ValueError("empty loss trace")
    losses = trace.losses
    report = ConvergenceReport(verdict="PASS", c_hat=c_hat, alpha=trace.alpha,
                               violations=_loss_increases(losses))

    best_loss = losses.min()
    report.gap = losses - best_loss
    if snapshots is not None and len(snapshots) >= 2:
        if snapshot_steps is None or len(snapshot_steps) != len(snapshots):
            raise ValueError("snapshot_steps must align with snapshots")
        snaps = [np.asarray(s, dtype=np.float64).ravel() for s in snapshots]
        snap_losses = losses[list(snapshot_steps)]
        best_i = int(np.argmin(snap_losses))
        dists = np.array([np.linalg.norm(s - snaps[best_i]) for s in snaps])
        dmax = dists.max()
        if dmax > 0:
            report.z_hat = 1.0 / (dmax * dmax)
        report.gap = losses - snap_losses[best_i]

    if trace.method != FULL_BATCH_GD:
        report.verdict = "ASSUMPTIONS-NOT-MET"
        report.notes.append(f"optimizer {trace.method!r} is outside the "
                            f"plain full-batch GD setting")
        return report

    if report.violations:
        report.verdict = "VIOLATION"
        report.notes.append("loss increased under plain gradient descent")

    if c_hat is not None and trace.alpha <= 1.0 / c_hat:
        if report.z_hat is not None:
            denom = report.z_hat * trace.alpha * (1.0 - c_hat * trace.alpha / 2.0)
            t = np.arange(1, trace.steps)
            report.bound = np.concatenate([[np.inf], 1.0 / (t * denom)])
            report.bound_checked = True
            if np.any(report.gap[1:] > report.bound[1:]):
                report.verdict = "VIOLATION"
                report.notes.append("gap to the best iterate exceeded the "
                                    "bound curve")
        else:
            report.notes.append("no snapshots: bound curve not checked")
    else:
        report.notes.append("alpha above 1/c_hat: bound curve not applicable")
    return report


@dataclass
class AnomalyReport:
    loss_increase_epochs: list
    per_domain_accuracy: dict
    gap: float
    flagged: bool
    reasons: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def summary(self):
        lines = [f"flagged: {self.flagged}",
                 f"loss increases at epochs: {self.loss_increase_epochs or 'none'}",
                 f"domain accuracy gap: "
                 f"{'n/a' if self.gap is None else f'{self.gap:.4f}'}"]
        for d, a in self.per_domain_accuracy.items():
            lines.append(f"domain {d}: accuracy {a:.4f}")
        lines += [f"reason: {r}" for r in self.reasons]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def detect_gate_anomaly(finetune_losses, per_domain_eval, grace_epochs=4,
                        gap_threshold=0.15, rise_tolerance=0.005) -> AnomalyReport:
    """Flag a fine-tune run whose loss rises after the grace period or whose
    per-source-domain accuracies diverge beyond the threshold.

    `per_domain_eval` maps domain name to an accuracy (or any object with an
    .accuracy attribute). Rises smaller than `rise_tolerance` (relative) are
    treated as noise.
    """
    losses = np.asarray(finetune_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < grace_epochs + 1:
        raise ValueError(f"need at least {grace_epochs + 1} epochs of losses")
    increases = [e for e in range(1, losses.size)
                 if losses[e] > losses[e - 1] * (1.0 + rise_tolerance)]
    accuracies = {d: float(getattr(m, "accuracy", m))
                  for d, m in per_domain_eval.items()}

    reasons, notes = [], []
    post_grace = [e for e in increases if e > grace_epochs]
    if post_grace:
        reasons.append(f"loss rose after the {grace_epochs}-epoch grace "
                       f"period (first at epoch {post_grace[0]})")
    gap = None
    if len(accuracies) >= 2:
        values = list(accuracies.values())
        gap = float(max(values) - min(values))
        if gap > gap_threshold:
            reasons.append(f"per-domain accuracy gap {gap:.3f} exceeds "
                           f"threshold {gap_threshold}")
    else:
        notes.append("single domain: accuracy gap check skipped")
    return AnomalyReport(loss_increase_epochs=increases,
                         per_domain_accuracy=accuracies, gap=gap,
                         flagged=bool(reasons), reasons=reasons, notes=notes)


# -- tower-only full-batch GD runner -----------------------------------------

class TowerObjective:
    """Full-batch multi-task tower loss over fixed gated inputs.

    Freezing experts and fixing gates makes each tower's input constant, so
    the whole objective is a pure function of the tower parameters; this is
    the regime the plain-GD convergence guarantee speaks about.
    """

    def __init__(self, model, data: LabeledDataset):
        from .fusion import concat_representations, gate_output

        self.tasks = list(model.task_ids)
        self.towers = {t: model.towers[t] for t in self.tasks}
        self.weights = dict(model.loss_weights)
        self.labels = {t: data.labels[t] for t in self.tasks}
        stacked = concat_representations(model.experts, data.features)
        self.inputs = {t: gate_output(model.gates[t], stacked, data.features)
                       for t in self.tasks}
        for tower in self.towers.values():
            tower.params.unfreeze()
        self._sizes = [(t, self.towers[t].params.to_vector().size)
                       for t in self.tasks]

    def get_vector(self):
        return np.concatenate([self.towers[t].params.to_vector()
                               for t in self.tasks])

    def set_vector(self, vec):
        offset = 0
        for t, n in self._sizes:
            self.towers[t].params.load_vector(vec[offset:offset + n])
            offset += n

    def loss_and_grad(self):
        total = None
        sets = [self.towers[t].params for t in self.tasks]
        for t in self.tasks:
            logits = head_forward(self.towers[t].params, Tensor(self.inputs[t]))
            loss = cross_entropy(softmax(logits), self.labels[t])
            weighted = loss * self.weights[t]
            total = weighted if total is None else total + weighted
        grads = backward(total, *sets)
        if len(sets) == 1:
            grads = (grads,)
        flat = []
        for (t, _n), gset in zip(self._sizes, grads):
            params = self.towers[t].params
            flat.append(np.concatenate(
                [np.asarray(gset.get(name, np.zeros_like(tensor.data))).ravel()
                 for name, tensor in params.items()]))
        return total.item(), np.concatenate(flat)

    def grad_at(self, vec):
        self.set_vector(vec)
        return self.loss_and_grad()[1]


def run_tower_gd(model, data, steps=150, alpha=None, snapshot_every=10,
                 probe_eps=1e-3, max_retries=8, seed=0):
    """Full-batch GD on the towers with alpha = 0.5 / c_hat (unless given).

    c_hat starts from probe points around the start and keeps the running
    maximum of the gradient-difference secants along the trajectory itself;
    whenever the traversed path reveals curvature that breaks
    alpha <= 1/c_hat, the run restarts from the initial towers with the
    smaller step. c_hat only grows, so the retries terminate.

    Returns (trace, snapshots, snapshot_steps, c_hat, report).
    """
    objective = TowerObjective(model, data)
    theta0 = objective.get_vector()
    rng = np.random.default_rng(seed)

    probe_points = [theta0]
    scale = probe_eps * (1.0 + np.linalg.norm(theta0))
    for _ in range(4):
        direction = rng.normal(size=theta0.size)
        probe_points.append(theta0 + scale * direction / np.linalg.norm(direction))
    c_hat = estimate_lipschitz(objective.grad_at, probe_points)
    chosen_alpha = alpha

    for attempt in range(max_retries):
        a = chosen_alpha if chosen_alpha is not None else 0.5 / c_hat
        losses = np.zeros(steps + 1)
        snapshots, snapshot_steps = [], []
        vec = theta0.copy()
        prev_vec = prev_grad = None
        restart = False
        for t in range(steps + 1):
            objective.set_vector(vec)
            loss, grad = objective.loss_and_grad()
            losses[t] = loss
            if prev_grad is not None:
                dw = np.linalg.norm(vec - prev_vec)
                if dw > 0:
                    c_hat = max(c_hat, np.linalg.norm(grad - prev_grad) / dw)
                    if chosen_alpha is None and a > 1.0 / c_hat \
                            and attempt < max_retries - 1:
                        restart = True
                        break
            if t % snapshot_every == 0 or t == steps:
                snapshots.append(vec.copy())
                snapshot_steps.append(t)
            prev_vec, prev_grad = vec, grad
            if t < steps:
                vec = vec - a * grad
        if not restart:
            break
        log.info("lipschitz estimate grew to %.4g at step %d; restarting "
                 "with a smaller step (attempt %d)", c_hat, t, attempt + 2)
    trace = LossTrace(losses=losses, alpha=a, method=FULL_BATCH_GD)
    report = check_convergence(trace, c_hat=c_hat, snapshots=snapshots,
                               snapshot_steps=snapshot_steps)
    return trace, snapshots, snapshot_steps, c_hat, report


def write_convergence_csv(path, trace: LossTrace, report: ConvergenceReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "gap", "bound"])
        for t in range(trace.steps):
            bound = ""
            if report.bound is not None and t >= 1:
                bound = repr(float(report.bound[t]))
            gap = repr(float(report.gap[t])) if report.gap is not None else ""
            w.writerow([t, repr(float(trace.losses[t])), gap, bound])
