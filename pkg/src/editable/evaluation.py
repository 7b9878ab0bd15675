"""Edit quality metrics: drawdown, success rate, step counts and descriptors."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constraints import EditConstraint
from .editors import EditorConfig, edit
from .models import ModelConfig, ParamSet, log_probs, predict


class EvaluationError(ValueError):
    pass


@dataclass
class EditEvalReport:
    n_edits: int
    base_error: float
    mean_drawdown: float
    signed_mean_drawdown: float
    success_rate: float
    mean_steps: float
    mean_steps_success: float | None
    per_edit: list[dict]
    confusion_drawdown: list[list[float]]
    editable_groups: list[str] = field(default_factory=list)
    editor: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_edits": self.n_edits,
            "base_error": self.base_error,
            "mean_drawdown": self.mean_drawdown,
            "signed_mean_drawdown": self.signed_mean_drawdown,
            "success_rate": self.success_rate,
            "mean_steps": self.mean_steps,
            "mean_steps_success": self.mean_steps_success,
            "editable_groups": self.editable_groups,
            "editor": self.editor,
            "confusion_drawdown": self.confusion_drawdown,
            "per_edit": self.per_edit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _error_rate(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred != labels))


def _per_class_error(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    wrong = np.bincount(labels, weights=(pred != labels).astype(np.float64), minlength=num_classes)
    count = np.bincount(labels, minlength=num_classes)
    return np.divide(wrong, count, out=np.zeros(num_classes), where=count > 0)


def _control_mask(control_set, constraint: EditConstraint, exclude_edited: bool) -> np.ndarray:
    mask = np.ones(len(control_set.labels), dtype=bool)
    if exclude_edited and constraint.source is not None:
        mask[constraint.source] = False
    return mask


def _run_one(args) -> dict:
    model, params, constraint, cfg, control_set, exclude_edited, base_pred = args
    edited, trace = edit(model, params, constraint, cfg)
    after = predict(model, edited, control_set.features)
    mask = _control_mask(control_set, constraint, exclude_edited)
    labels = control_set.labels
    pre_class = int(predict(model, params, constraint.x[None, :])[0])
    return {
        "target": constraint.y_ref,
        "source": constraint.source,
        "pre_edit_class": pre_class,
        "trace": trace.to_dict(),
        "error_before": _error_rate(base_pred[mask], labels[mask]),
        "error_after": _error_rate(after[mask], labels[mask]),
        "class_error_delta": (
            _per_class_error(after[mask], labels[mask], control_set.num_classes)
            - _per_class_error(base_pred[mask], labels[mask], control_set.num_classes)
        ).tolist(),
    }


def _run_edits(model, params, edits, cfg, control_set, exclude_edited, workers) -> list[dict]:
    plain = params.detach()
    base_pred = predict(model, plain, control_set.features)
    jobs = [(model, plain, c, cfg, control_set, exclude_edited, base_pred) for c in edits]
    if workers <= 1 or len(jobs) < 2:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, so results merge by edit index
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def evaluate_edits(
    model: ModelConfig,
    params: ParamSet,
    edit_set: Sequence[EditConstraint],
    cfg: EditorConfig,
    control_set,
    *,
    exclude_edited: bool = False,
    workers: int = 1,
) -> EditEvalReport:
    """Run every edit independently from ``params`` and score the side effects.

    Drawdown of one edit is ``|err_after - err_before|`` on the control set.
    Failed edits count ``k`` steps in ``mean_steps``.  Aggregates use exactly
    rounded sums, so they do not depend on edit order.
    """
    if not edit_set:
        raise EvaluationError("edit_set is empty")
    if len(control_set.labels) == 0:
        raise EvaluationError("control_set is empty")
    records = _run_edits(model, params, edit_set, cfg, control_set, exclude_edited, workers)
    n = len(records)
    C = control_set.num_classes
    base_error = _error_rate(predict(model, params, control_set.features), control_set.labels)

    dd = [abs(r["error_after"] - r["error_before"]) for r in records]
    signed = [r["error_after"] - r["error_before"] for r in records]
    for r, d in zip(records, dd):
        r["drawdown"] = d
    ok = [r["trace"]["satisfied"] for r in records]
    steps = [r["trace"]["steps_taken"] if s else cfg.k for r, s in zip(records, ok)]
    ok_steps = [r["trace"]["steps_taken"] for r, s in zip(records, ok) if s]

    conf = np.zeros((C, C))
    counts = np.zeros(C)
    # per-row sums accumulated exactly so the matrix is order independent
    row_terms: dict[int, list[list[float]]] = {}
    for r in records:
        row_terms.setdefault(r["pre_edit_class"], []).append(r["class_error_delta"])
    for a, terms in row_terms.items():
        counts[a] = len(terms)
        cols = np.abs(np.array(terms))
        conf[a] = [math.fsum(cols[:, b]) / counts[a] for b in range(C)]

    groups = sorted(params.editable_mask if cfg.groups is None else cfg.groups)
    return EditEvalReport(
        n_edits=n,
        base_error=base_error,
        mean_drawdown=math.fsum(dd) / n,
        signed_mean_drawdown=math.fsum(signed) / n,
        success_rate=sum(ok) / n,
        mean_steps=math.fsum(steps) / n,
        mean_steps_success=(math.fsum(ok_steps) / len(ok_steps)) if ok_steps else None,
        per_edit=records,
        confusion_drawdown=conf.tolist(),
        editable_groups=groups,
        editor=cfg.to_dict(),
    )


def sequential_edit_eval(
    model: ModelConfig,
    params: ParamSet,
    edit_sequence: Sequence[EditConstraint],
    cfg: EditorConfig,
    control_set,
) -> tuple[list[float], list[bool]]:
    """Apply edits cumulatively; control error after 0..N edits plus success flags."""
    current = params.detach()
    curve = [_error_rate(predict(model, current, control_set.features), control_set.labels)]
    flags = []
    for constraint in edit_sequence:
        current, trace = edit(model, current, constraint, cfg)
        flags.append(trace.satisfied)
        curve.append(_error_rate(predict(model, current, control_set.features), control_set.labels))
    return curve, flags


def kl_rows(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probabilities."""
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)


def descriptor_matrix(
    model: ModelConfig,
    params: ParamSet,
    edit_set: Sequence[EditConstraint],
    cfg: EditorConfig,
    control_set,
) -> np.ndarray:
    """``N_edits x M_control`` matrix of KL(pre-edit || post-edit) per control sample."""
    if not edit_set:
        raise EvaluationError("edit_set is empty")
    before = log_probs(model, params, control_set.features)
    rows = []
    for constraint in edit_set:
        edited, _ = edit(model, params, constraint, cfg)
        after = log_probs(model, edited, control_set.features)
        rows.append(np.maximum(kl_rows(before, after), 0.0))
    return np.stack(rows)


def explained_variance(matrix: np.ndarray, max_components: int | None = None) -> list[float]:
    """Cumulative explained-variance ratios of the column-centered matrix.

    By default the curve stops at the numerical rank, where it reaches 1.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise EvaluationError("explained_variance needs a 2-D matrix")
    centered = m - m.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    energy = s ** 2
    total = energy.sum()
    if total == 0 or not np.isfinite(total):
        raise EvaluationError("matrix is degenerate after centering")
    tol = s[0] * max(m.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    n = rank if max_components is None else min(max_components, len(s))
    return (np.cumsum(energy) / total)[:n].tolist()


def paired_generalization_eval(
    model: ModelConfig,
    params: ParamSet,
    pairs: Sequence[tuple[np.ndarray, np.ndarray, int]],
    cfg: EditorConfig,
) -> float:
    """Edit on the first input of each pair; fraction of probes predicted as the target."""
    if not pairs:
        raise EvaluationError("no pairs given")
    hits = 0
    for edit_x, probe_x, y_ref in pairs:
        edited, _ = edit(model, params, EditConstraint(edit_x, y_ref), cfg)
        hits += int(predict(model, edited, np.asarray(probe_x)[None, :])[0] == y_ref)
    return hits / len(pairs)
