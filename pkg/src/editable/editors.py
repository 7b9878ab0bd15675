"""Gradient-based editor functions.

``edit`` runs up to ``k`` optimizer steps on the constraint value, stopping as
soon as it is non-positive.  In differentiable mode the returned parameters
are graph functions of the inputs and of the trainable step-size parameters,
so an outer loss can be backpropagated through every executed step.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .constraints import EditConstraint, constraint_value, is_satisfied
from .models import ModelConfig, ParamSet, select_editable

VARIANTS = ("gd", "scaled_gd", "rprop", "rmsprop", "momentum", "adam")
TRAINABLE = ("alpha", "beta")


class EditorConfigError(ValueError):
    pass


class EditError(RuntimeError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"edit step {step}: {message}")


class TuningError(RuntimeError):
    def __init__(self, best_rate: float, threshold: float):
        self.best_rate = best_rate
        super().__init__(
            f"no editor candidate reached success rate {threshold:.2%}; best was {best_rate:.2%}"
        )


@dataclass(frozen=True)
class EditorConfig:
    variant: str = "rmsprop"
    k: int = 10
    alpha: float = 1e-3
    beta: float = 0.9  # RMSProp decay, also Adam's second-moment decay
    mu: float = 0.9
    beta1: float = 0.5
    epsilon: float = 1e-8
    trainable: frozenset = frozenset()
    groups: tuple[str, ...] | None = None
    momentum_first_grad: bool = False
    detach_rms_denominator: bool = False

    def __post_init__(self):
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(self.groups))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise EditorConfigError(f"unknown editor variant {self.variant!r}")
        if self.k < 0:
            raise EditorConfigError("k must be non-negative")
        if not self.alpha > 0:
            raise EditorConfigError("alpha must be positive")
        if not 0 < self.beta < 1:
            raise EditorConfigError("beta must lie in (0, 1)")
        if not 0 <= self.mu < 1:
            raise EditorConfigError("mu must lie in [0, 1)")
        if not 0.1 <= self.beta1 < 1.0:
            raise EditorConfigError("beta1 must lie in [0.1, 1.0)")
        if not self.epsilon > 0:
            raise EditorConfigError("epsilon must be positive")
        unknown = self.trainable - set(TRAINABLE)
        if unknown:
            raise EditorConfigError(f"unknown trainable fields {sorted(unknown)}")
        if self.groups is not None and not self.groups:
            raise EditorConfigError("groups must be non-empty when given")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = sorted(self.trainable)
        d["groups"] = None if self.groups is None else list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EditorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise EditorConfigError(f"unknown editor keys: {sorted(unknown)}")
        return cls(**d)

    def hyperparams(self, dtype, requires_grad: bool = False) -> "EditorHyperparams":
        return EditorHyperparams.from_config(self, dtype, requires_grad)


@dataclass
class EditorHyperparams:
    """Step size and decay as tensors.

    ``log_alpha`` and ``beta_logit`` are the unconstrained parameterizations
    optimized during training; ``alpha = exp(log_alpha)`` and
    ``beta = sigmoid(beta_logit)``.
    """

    log_alpha: Tensor
    beta_logit: Tensor

    @classmethod
    def from_config(cls, cfg: EditorConfig, dtype, requires_grad: bool = False) -> "EditorHyperparams":
        dtype = np.dtype(dtype)
        la = Tensor(np.array(math.log(cfg.alpha), dtype=dtype), requires_grad="alpha" in cfg.trainable and requires_grad)
        bl = Tensor(
            np.array(math.log(cfg.beta / (1.0 - cfg.beta)), dtype=dtype),
            requires_grad="beta" in cfg.trainable and requires_grad,
        )
        return cls(la, bl)

    @property
    def alpha(self) -> Tensor:
        return ad.exp(self.log_alpha)

    @property
    def beta(self) -> Tensor:
        return ad.sigmoid(self.beta_logit)

    def trainable_leaves(self) -> dict[str, Tensor]:
        out = {}
        if self.log_alpha.requires_grad:
            out["log_alpha"] = self.log_alpha
        if self.beta_logit.requires_grad:
            out["beta_logit"] = self.beta_logit
        return out

    def apply_to(self, cfg: EditorConfig) -> EditorConfig:
        return replace(
            cfg,
            alpha=float(np.exp(np.float64(self.log_alpha.data))),
            beta=float(1.0 / (1.0 + np.exp(-np.float64(self.beta_logit.data)))),
        )


@dataclass
class EditTrace:
    steps_taken: int
    l_e_values: list[float]
    satisfied: bool

    def to_dict(self) -> dict:
        return {"steps_taken": self.steps_taken, "l_e_values": self.l_e_values, "satisfied": self.satisfied}


@dataclass
class OptimizerState:
    """Per-edit optimizer buffers, keyed by parameter name."""

    step: int = 0
    rms: dict[str, Tensor] = field(default_factory=dict)
    velocity: dict[str, Tensor] = field(default_factory=dict)
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)
    first_grad: dict[str, Tensor] = field(default_factory=dict)
    first_grad_norm: Tensor | None = None


def _global_norm(grads: Mapping[str, Tensor]) -> Tensor:
    total = None
    for g in grads.values():
        s = ad.sum(g * g)
        total = s if total is None else total + s
    if total is None or float(total.data) == 0.0:
        raise EditorConfigError("scaled_gd: first gradient has zero norm")
    return ad.sqrt(total)


def step_direction(
    variant: str,
    grads: Mapping[str, Tensor],
    state: OptimizerState,
    cfg: EditorConfig,
    hp: EditorHyperparams | None = None,
) -> dict[str, Tensor]:
    """Parameter decrements for one editor step; advances ``state``."""
    if hp is None:
        dtype = next(iter(grads.values())).dtype
        hp = cfg.hyperparams(dtype)
    alpha = hp.alpha
    t = state.step
    out: dict[str, Tensor] = {}
    if variant == "gd":
        out = {n: alpha * g for n, g in grads.items()}
    elif variant == "scaled_gd":
        if state.first_grad_norm is None:
            state.first_grad_norm = _global_norm(grads)
        scale = alpha / state.first_grad_norm
        out = {n: scale * g for n, g in grads.items()}
    elif variant == "rprop":
        out = {n: alpha * ad.sign(g) for n, g in grads.items()}
    elif variant == "rmsprop":
        beta = hp.beta
        for n, g in grads.items():
            sq = g * g
            rms = sq if t == 0 else beta * state.rms[n] + (1.0 - beta) * sq
            state.rms[n] = rms
            denom = ad.sqrt(rms + cfg.epsilon)
            if cfg.detach_rms_denominator:
                denom = ad.stop_gradient(denom)
            out[n] = alpha * g / denom
    elif variant == "momentum":
        if t == 0:
            state.first_grad = dict(grads)
        for n, g in grads.items():
            g_used = state.first_grad[n] if cfg.momentum_first_grad else g
            v = alpha * g_used if t == 0 else alpha * g_used + cfg.mu * state.velocity[n]
            state.velocity[n] = v
            out[n] = v
    elif variant == "adam":
        beta2 = hp.beta
        b1 = cfg.beta1
        beta2_pow = beta2
        for _ in range(t):
            beta2_pow = beta2_pow * beta2
        for n, g in grads.items():
            m = (1.0 - b1) * g if t == 0 else b1 * state.first_moment[n] + (1.0 - b1) * g
            sq = g * g
            v = (1.0 - beta2) * sq if t == 0 else beta2 * state.second_moment[n] + (1.0 - beta2) * sq
            state.first_moment[n], state.second_moment[n] = m, v
            m_hat = m / (1.0 - b1 ** (t + 1))
            v_hat = v / (1.0 - beta2_pow)
            denom = ad.sqrt(v_hat + cfg.epsilon)
            if cfg.detach_rms_denominator:
                denom = ad.stop_gradient(denom)
            out[n] = alpha * m_hat / denom
    else:
        raise EditorConfigError(f"unknown editor variant {variant!r}")
    state.step += 1
    return out


def edit(
    model: ModelConfig,
    params: ParamSet,
    constraint: EditConstraint,
    cfg: EditorConfig,
    differentiable: bool = False,
    *,
    hparams: EditorHyperparams | None = None,
    second_order: bool = True,
) -> tuple[ParamSet, EditTrace]:
    """Apply up to ``cfg.k`` editor steps until the constraint holds.

    Only groups in the editable mask (or ``cfg.groups`` when set) change.  In
    differentiable mode gradients flow through every executed step; with
    ``second_order=False`` the inner gradients are treated as constants.
    The early-stop test always uses plain values.
    """
    mask = params.editable_mask if cfg.groups is None else select_editable(params, cfg.groups).editable_mask
    view = ParamSet(params.groups, mask)
    names = [n for n, _ in view.editable()]
    dtype = view[names[0]].dtype
    if hparams is None:
        hparams = cfg.hyperparams(dtype)
    if not differentiable:
        view = view.detach()
        hparams = EditorHyperparams(hparams.log_alpha.detach(), hparams.beta_logit.detach())

    state = OptimizerState()
    current = {n: view[n] for n in names}
    values: list[float] = []
    satisfied = False
    for step in range(cfg.k + 1):
        if differentiable:
            theta = current
        else:
            theta = {n: Tensor(t.data, requires_grad=True) for n, t in current.items()}
        le = constraint_value(model, view.replace(theta), constraint)
        value = float(le.data)
        if not math.isfinite(value):
            raise EditError(step, f"non-finite constraint value {value}")
        values.append(value)
        if is_satisfied(value):
            satisfied = True
            break
        if step == cfg.k:
            break
        wrt = [theta[n] for n in names]
        if not all(w.requires_grad for w in wrt):
            raise EditError(step, "editable parameters do not require gradients")
        create = differentiable and second_order
        grads = dict(zip(names, ad.grad(le, wrt, create_graph=create)))
        for n, g in grads.items():
            if not np.all(np.isfinite(g.data)):
                raise EditError(step, f"non-finite gradient for {n}")
        update = step_direction(cfg.variant, grads, state, cfg, hparams)
        if differentiable:
            current = {n: theta[n] - update[n] for n in names}
        else:
            current = {n: Tensor(theta[n].data - update[n].data) for n in names}

    steps = len(values) - 1
    edited = ParamSet(params.groups, params.editable_mask).replace(current)
    return edited, EditTrace(steps, values, satisfied)


# -- tuning ------------------------------------------------------------------

def expand_grid(base: EditorConfig, axes: Mapping[str, Sequence]) -> list[EditorConfig]:
    """Cartesian product of ``axes`` applied on top of ``base``, in key order."""
    keys = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        changes = dict(zip(keys, combo))
        if "groups" in changes and changes["groups"] is not None:
            changes["groups"] = tuple(changes["groups"])
        out.append(replace(base, **changes))
    return out


@dataclass
class TuningResult:
    best: EditorConfig
    candidates: list[dict]

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "candidates": self.candidates}


def tune_editor(
    model: ModelConfig,
    params: ParamSet,
    edit_pool: Sequence[EditConstraint],
    control_set,
    grid: Iterable[EditorConfig],
    k: int = 10,
    min_success: float = 0.95,
) -> TuningResult:
    """Pick the candidate with lowest drawdown among those succeeding often enough.

    Every candidate is run with ``k`` steps on ``edit_pool``.  Ties on
    drawdown go to the earlier grid entry.
    """
    from .evaluation import evaluate_edits

    rows = []
    best_idx, best_dd, best_rate = None, math.inf, 0.0
    for i, cand in enumerate(grid):
        cand = replace(cand, k=k)
        report = evaluate_edits(model, params, edit_pool, cand, control_set)
        rows.append(
            {
                "editor": cand.to_dict(),
                "success_rate": report.success_rate,
                "mean_drawdown": report.mean_drawdown,
                "mean_steps": report.mean_steps,
            }
        )
        best_rate = max(best_rate, report.success_rate)
        if report.success_rate >= min_success and report.mean_drawdown < best_dd:
            best_idx, best_dd = i, report.mean_drawdown
    if best_idx is None:
        raise TuningError(best_rate, min_success)
    return TuningResult(EditorConfig.from_dict({**rows[best_idx]["editor"]}), rows)
