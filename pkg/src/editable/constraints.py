"""Edit constraints and the samplers that produce them.

An edit asks that the reference class outscore every competitor on a single
input.  The constraint value is

    l_e = max_{i in competitors} log p(i | x) - log p(y_ref | x)

and the edit is satisfied when ``l_e <= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelConfig, ParamSet, forward


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class EditConstraint:
    """One edit task.

    ``competitors=None`` means every class other than ``y_ref``.  ``source``
    optionally records the row of the dataset the input came from.
    """

    x: np.ndarray
    y_ref: int
    competitors: tuple[int, ...] | None = None
    source: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x).reshape(-1))
        object.__setattr__(self, "y_ref", int(self.y_ref))
        if self.competitors is not None:
            comp = tuple(int(c) for c in self.competitors)
            if not comp:
                raise ConstraintError("competitor set is empty")
            if self.y_ref in comp:
                raise ConstraintError("y_ref must not be among its competitors")
            object.__setattr__(self, "competitors", comp)

    def competitor_indices(self, num_classes: int) -> list[int]:
        if self.competitors is None:
            return [c for c in range(num_classes) if c != self.y_ref]
        if max(self.competitors) >= num_classes or min(self.competitors) < 0:
            raise ConstraintError("competitor index out of range")
        return list(self.competitors)

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y_ref": self.y_ref,
            "competitors": None if self.competitors is None else list(self.competitors),
            "source": self.source,
        }


def margin_from_scores(reference: Tensor, competitor_scores: Tensor) -> Tensor:
    """``max(competitor_scores) - reference`` for log-probability scores.

    This is the general form: the scores may be class log-probabilities or
    sequence log-likelihoods of alternative outputs.
    """
    if competitor_scores.ndim != 1 or competitor_scores.shape[0] == 0:
        raise ConstraintError("competitor scores must be a non-empty vector")
    return ad.max_over_axis(competitor_scores, axis=0) - reference


def margin_constraint(logits: Tensor, y_ref: int, competitors: Sequence[int] | None = None) -> Tensor:
    """Constraint value for one example's logits (shape ``C`` or ``1 x C``)."""
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2 or logits.shape[0] != 1:
        raise ConstraintError(f"expected logits for one example, got shape {logits.shape}")
    num_classes = logits.shape[1]
    if num_classes < 2:
        raise ConstraintError("need at least two classes")
    if not 0 <= y_ref < num_classes:
        raise ConstraintError(f"y_ref {y_ref} out of range")
    comp = [c for c in range(num_classes) if c != y_ref] if competitors is None else list(competitors)
    if not comp or y_ref in comp:
        raise ConstraintError("competitors must be non-empty and exclude y_ref")
    lp = ad.log_softmax(logits)
    ref = ad.reshape(ad.take_columns(lp, [y_ref]), ())
    others = ad.reshape(ad.take_columns(lp, comp), (len(comp),))
    return margin_from_scores(ref, others)


def constraint_value(config: ModelConfig, params: ParamSet, constraint: EditConstraint) -> Tensor:
    logits = forward(config, params, constraint.x)
    return margin_constraint(logits, constraint.y_ref, constraint.competitor_indices(config.num_classes))


def is_satisfied(value: float) -> bool:
    value = float(value)
    if math.isnan(value):
        raise ConstraintError("constraint value is NaN")
    return value <= 0.0


# -- samplers ----------------------------------------------------------------

def load_rank_histogram(path: str | Path) -> np.ndarray:
    """Read ``rank probability`` pairs, one per line; ranks start at 0."""
    pairs: dict[int, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConstraintError(f"{path}:{lineno}: expected 'rank probability'")
        rank, prob = int(parts[0]), float(parts[1])
        if rank < 0 or prob < 0 or rank in pairs:
            raise ConstraintError(f"{path}:{lineno}: invalid or duplicate entry")
        pairs[rank] = prob
    if not pairs:
        raise ConstraintError(f"{path}: empty rank histogram")
    hist = np.zeros(max(pairs) + 1)
    for r, p in pairs.items():
        hist[r] = p
    return validate_histogram(hist)


def validate_histogram(hist) -> np.ndarray:
    hist = np.asarray(hist, dtype=np.float64)
    if hist.ndim != 1 or hist.size == 0 or np.any(hist < 0):
        raise ConstraintError("rank histogram must be a non-negative vector")
    if abs(hist.sum() - 1.0) > 1e-6:
        raise ConstraintError(f"rank histogram sums to {hist.sum()}, expected 1")
    return hist / hist.sum()


@dataclass
class TargetSampler:
    """Draws edit tasks.

    ``strategy`` is ``uniform`` (any class, including the current one),
    ``rank_matched`` (target is the class at a rank drawn from ``histogram``)
    or ``pool`` (round-robin over fixed constraints).  Each draw uses a
    generator seeded by ``(seed, draw index)``.
    """

    strategy: str = "uniform"
    seed: int = 0
    histogram: np.ndarray | None = None
    pool: Sequence[EditConstraint] | None = None
    draws: int = 0

    def __post_init__(self):
        if self.strategy not in ("uniform", "rank_matched", "pool"):
            raise ConstraintError(f"unknown sampling strategy {self.strategy!r}")
        if self.strategy == "rank_matched":
            if self.histogram is None:
                raise ConstraintError("rank_matched sampling needs a histogram")
            self.histogram = validate_histogram(self.histogram)
        if self.strategy == "pool" and not self.pool:
            raise ConstraintError("pool sampling needs a non-empty pool")

    def rng_for(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, index])


ScoreSource = np.ndarray | Callable[[np.ndarray], np.ndarray]


def sample_edit(dataset, model_scores: ScoreSource | None, sampler: TargetSampler) -> EditConstraint:
    """Draw the next edit task from ``dataset`` and advance the sampler.

    ``model_scores`` is either an ``N x C`` array aligned with the dataset or
    a callable mapping one input to its class scores; it is required for
    rank-matched sampling.
    """
    index = sampler.draws
    sampler.draws += 1
    if sampler.strategy == "pool":
        return sampler.pool[index % len(sampler.pool)]
    n = len(dataset.labels)
    if n == 0:
        raise ConstraintError("cannot sample edits from an empty dataset")
    rng = sampler.rng_for(index)
    row = int(rng.integers(n))
    x = dataset.features[row]
    C = dataset.num_classes
    if sampler.strategy == "uniform":
        return EditConstraint(x, int(rng.integers(C)), source=row)
    if model_scores is None:
        raise ConstraintError("rank_matched sampling requires model scores")
    scores = model_scores(x) if callable(model_scores) else model_scores[row]
    scores = np.asarray(scores).reshape(-1)
    ranking = np.argsort(-scores, kind="stable")
    rank = int(rng.choice(len(sampler.histogram), p=sampler.histogram))
    return EditConstraint(x, int(ranking[min(rank, C - 1)]), source=row)


def sample_edits(dataset, count: int, sampler: TargetSampler, model_scores=None) -> list[EditConstraint]:
    return [sample_edit(dataset, model_scores, sampler) for _ in range(count)]
