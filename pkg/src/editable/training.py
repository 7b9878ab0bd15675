"""Editable Training: base loss plus edit-reliability and locality penalties.

Each outer step samples one edit, unrolls the editor differentiably from the
current parameters, and minimizes::

    L_base + c_edit * max(0, l_e(edited)) + c_loc * KL(p(.|theta) || p(.|edited))

The KL is averaged over a control batch, with the unedited predictions held
constant.  The editor's step size (and decay) can be trained alongside.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .constraints import EditConstraint, TargetSampler, constraint_value, sample_edit
from .editors import EditorConfig, EditorHyperparams, edit
from .models import ModelConfig, ParamSet, cross_entropy, forward, init_params


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"step {step}: non-finite {what}")


@dataclass(frozen=True)
class TrainConfig:
    c_edit: float = 0.01
    c_loc: float = 0.01
    editor: EditorConfig = field(default_factory=EditorConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    editor_lr: float | None = None
    batch_size: int = 128
    epochs: int = 10
    second_order: bool = True
    base_loss: str = "cross_entropy"
    control_batch: str = "same_batch"
    sampler: str = "uniform"
    rank_histogram: tuple[float, ...] | None = None
    log_timing: bool = False

    def __post_init__(self):
        if isinstance(self.editor, Mapping):
            object.__setattr__(self, "editor", EditorConfig.from_dict(self.editor))
        if self.rank_histogram is not None:
            object.__setattr__(self, "rank_histogram", tuple(self.rank_histogram))
        self.validate()

    def validate(self) -> None:
        for name in ("c_edit", "c_loc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not self.lr > 0 or (self.editor_lr is not None and not self.editor_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.base_loss not in ("cross_entropy", "distill_kl"):
            raise ValueError(f"unknown base_loss {self.base_loss!r}")
        if self.control_batch not in ("same_batch", "fresh_batch"):
            raise ValueError(f"unknown control_batch {self.control_batch!r}")
        if self.sampler not in ("uniform", "rank_matched"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "rank_matched" and self.rank_histogram is None:
            raise ValueError("rank_matched sampling needs rank_histogram")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["editor"] = self.editor.to_dict()
        d["rank_histogram"] = None if self.rank_histogram is None else list(self.rank_histogram)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        for key in ("L_base", "L_edit", "L_loc"):
            if not math.isfinite(record[key]):
                raise DivergenceError(record["step"], key)
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]


class Adam:
    """Adam on a dict of numpy arrays; returns new arrays, never mutates."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_overrides: Mapping[str, float] | None = None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_overrides = dict(lr_overrides or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, x in values.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            lr = self.lr_overrides.get(name, self.lr)
            out[name] = (x - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(x.dtype)
        return out


# -- loss pieces ---------------------------------------------------------------

def kl_divergence(log_p: Tensor, log_q: Tensor) -> Tensor:
    """Mean over rows of KL(p || q) given log-probabilities (``B x C``)."""
    if log_p.shape[0] == 0:
        raise ValueError("KL over an empty batch")
    p = ad.exp(log_p)
    return ad.mean(ad.sum(p * (log_p - log_q), axis=-1))


def edit_loss(
    model: ModelConfig,
    params: ParamSet,
    constraint: EditConstraint,
    editor_cfg: EditorConfig,
    *,
    hparams: EditorHyperparams | None = None,
    second_order: bool = True,
):
    """Hinge on the post-edit constraint value; also returns the edited params and trace."""
    edited, trace = edit(model, params, constraint, editor_cfg, differentiable=True,
                         hparams=hparams, second_order=second_order)
    loss = ad.relu(constraint_value(model, edited, constraint))
    return loss, edited, trace


def locality_loss(model: ModelConfig, params: ParamSet, edited: ParamSet, control_batch) -> Tensor:
    """KL from the original predictions (held constant) to the edited model's."""
    control_batch = np.asarray(control_batch)
    if len(control_batch) == 0:
        raise ValueError("control batch is empty")
    log_p = ad.stop_gradient(ad.log_softmax(forward(model, params, control_batch)))
    log_q = ad.log_softmax(forward(model, edited, control_batch))
    return kl_divergence(log_p, log_q)


@dataclass
class Components:
    base: float
    edit: float
    loc: float
    steps_taken: int


def objective(
    model: ModelConfig,
    params: ParamSet,
    batch: np.ndarray,
    labels: np.ndarray | None,
    constraint: EditConstraint | None,
    cfg: TrainConfig,
    *,
    hparams: EditorHyperparams | None = None,
    teacher_log_probs: np.ndarray | None = None,
    control_batch: np.ndarray | None = None,
) -> tuple[Tensor, Components]:
    """Total loss and its components.

    With ``c_edit == c_loc == 0`` the editor is not run and the total is the
    base loss node itself.
    """
    logits = forward(model, params, batch)
    if cfg.base_loss == "distill_kl":
        if teacher_log_probs is None:
            raise TrainingError("distill_kl needs teacher predictions")
        base = kl_divergence(Tensor(np.asarray(teacher_log_probs, dtype=logits.dtype)), ad.log_softmax(logits))
    else:
        base = cross_entropy(logits, labels)
    if cfg.c_edit == 0 and cfg.c_loc == 0:
        return base, Components(float(base.data), 0.0, 0.0, 0)
    if constraint is None:
        raise TrainingError("edit terms need a constraint")
    l_edit, edited, trace = edit_loss(model, params, constraint, cfg.editor,
                                      hparams=hparams, second_order=cfg.second_order)
    control = batch if control_batch is None else control_batch
    l_loc = locality_loss(model, params, edited, control)
    total = base + cfg.c_edit * l_edit + cfg.c_loc * l_loc
    return total, Components(float(base.data), float(l_edit.data), float(l_loc.data), trace.steps_taken)


# -- loops -----------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train(
    model: ModelConfig,
    dataset,
    config: TrainConfig,
    seed: int,
    *,
    init: ParamSet | None = None,
    teacher: tuple[ModelConfig, ParamSet] | None = None,
    on_step=None,
) -> tuple[ParamSet, EditorConfig, TrainLog]:
    """Minibatch training with Adam; returns params, editor config and the log.

    Edits are drawn from ``dataset`` with a uniform or rank-matched target.
    Runs are deterministic for a fixed seed.
    """
    params = (init if init is not None else init_params(model, seed)).detach()
    dtype = np.dtype(model.dtype)
    features = np.asarray(dataset.features, dtype=dtype)
    labels = dataset.labels
    n = len(labels)

    teacher_lp = None
    if config.base_loss == "distill_kl":
        if teacher is None:
            raise TrainingError("distill_kl requires a teacher model")
        t_cfg, t_params = teacher
        teacher_lp = ad.log_softmax(forward(t_cfg, t_params.detach(), features)).data.astype(dtype)

    editing = config.c_edit > 0 or config.c_loc > 0
    hp = EditorHyperparams.from_config(config.editor, dtype, requires_grad=True)
    editor_leaves = hp.trainable_leaves() if editing else {}
    sampler = TargetSampler(
        strategy=config.sampler,
        seed=seed + 1_000_003,
        histogram=None if config.rank_histogram is None else np.asarray(config.rank_histogram),
    )
    overrides = {f"editor.{k}": config.editor_lr for k in editor_leaves} if config.editor_lr else {}
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps, overrides)
    rng = np.random.default_rng(seed)
    ctrl_rng = np.random.default_rng([seed, 7])
    log = TrainLog()
    step = 0
    for _epoch in range(config.epochs):
        for idx in _batches(n, config.batch_size, rng):
            t0 = time.perf_counter()
            leaves = params.as_leaves()
            hp = EditorHyperparams(
                *(editor_leaves.get(k, getattr(hp, k)) for k in ("log_alpha", "beta_logit"))
            )
            constraint, control = None, None
            if editing:
                scores = None
                if config.sampler == "rank_matched":
                    scores = lambda x: forward(model, params, x).data  # noqa: E731
                constraint = sample_edit(dataset, scores, sampler)
                if config.control_batch == "fresh_batch":
                    control = features[ctrl_rng.choice(n, size=min(config.batch_size, n), replace=False)]
            total, comp = objective(
                model, leaves, features[idx], labels[idx], constraint, config,
                hparams=hp,
                teacher_log_probs=None if teacher_lp is None else teacher_lp[idx],
                control_batch=control,
            )
            if not math.isfinite(float(total.data)):
                raise DivergenceError(step, "objective")
            names = leaves.names()
            wrt = [leaves[nm] for nm in names] + list(editor_leaves.values())
            grads = ad.grad(total, wrt)
            gdict = {nm: g.data for nm, g in zip(names + [f"editor.{k}" for k in editor_leaves], grads)}
            for nm, g in gdict.items():
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(step, f"gradient of {nm}")
            values = {nm: leaves[nm].data for nm in names}
            values.update({f"editor.{k}": t.data for k, t in editor_leaves.items()})
            new = opt.step(values, gdict)
            params = ParamSet.from_arrays({nm: new[nm] for nm in names}, params.editable_mask)
            editor_leaves = {
                k: Tensor(new[f"editor.{k}"], requires_grad=True) for k in editor_leaves
            }
            current = EditorHyperparams(
                editor_leaves.get("log_alpha", hp.log_alpha), editor_leaves.get("beta_logit", hp.beta_logit)
            ).apply_to(config.editor)
            record = {
                "step": step,
                "L_base": comp.base,
                "L_edit": comp.edit,
                "L_loc": comp.loc,
                "steps_taken": comp.steps_taken,
                "alpha": current.alpha,
                "beta": current.beta,
            }
            if config.log_timing:
                record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            log.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
    final_hp = EditorHyperparams(
        editor_leaves.get("log_alpha", hp.log_alpha), editor_leaves.get("beta_logit", hp.beta_logit)
    )
    editor_cfg = final_hp.apply_to(config.editor) if editor_leaves else config.editor
    return params, editor_cfg, log


def fine_tune(
    teacher_model: ModelConfig,
    teacher: ParamSet,
    dataset,
    config: TrainConfig,
    seed: int,
    *,
    student_model: ModelConfig | None = None,
    student_init: ParamSet | None = None,
) -> tuple[ParamSet, EditorConfig, TrainLog]:
    """Editable fine-tuning with KL to a frozen teacher as the base loss.

    The student starts from the teacher's weights, or from ``student_init``
    (e.g. the teacher plus a zero-initialized extra block).
    """
    if config.base_loss != "distill_kl":
        config = replace(config, base_loss="distill_kl")
    student_model = student_model or teacher_model
    init = student_init if student_init is not None else teacher.copy()
    return train(student_model, dataset, config, seed, init=init, teacher=(teacher_model, teacher))
