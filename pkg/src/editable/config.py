"""Run configuration: one JSON document with model/data/train/editor/eval sections.

Everything is validated up front; unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .data_io import Dataset, gen_blobs, load_cifar_binary, load_idx, split, standardize
from .editors import EditorConfig, EditorConfigError
from .models import ModelConfig, ModelConfigError
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, section: str, d: Any, drop: tuple[str, ...] = ()):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{section}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(drop)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    num_classes: int = 10
    per_class: int = 700
    dim: int = 20
    spread: float = 1.0
    seed: int = 0
    train_size: int = 5000
    split_seed: int = 0
    standardize: bool = False
    train_files: tuple[str, ...] = ()
    control_files: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "train_files", tuple(self.train_files))
        object.__setattr__(self, "control_files", tuple(self.control_files))
        if self.source not in ("blobs", "idx", "cifar"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "idx" and (len(self.train_files) != 2 or len(self.control_files) != 2):
            raise ValueError("idx needs [images, labels] for train_files and control_files")
        if self.source == "cifar" and (not self.train_files or not self.control_files):
            raise ValueError("cifar needs train_files and control_files")

    def load(self) -> tuple[Dataset, Dataset]:
        """Train and control splits."""
        if self.source == "blobs":
            data = gen_blobs(self.num_classes, self.per_class, self.dim, self.spread, self.seed)
            train, control = split(data, self.train_size, self.split_seed)
        elif self.source == "idx":
            train = load_idx(*self.train_files, num_classes=self.num_classes)
            control = load_idx(*self.control_files, num_classes=self.num_classes)
        else:
            train = load_cifar_binary(self.train_files)
            control = load_cifar_binary(self.control_files)
        if self.standardize:
            train, control = standardize(train, control)
        return train, control


@dataclass(frozen=True)
class EvalConfig:
    n_edits: int = 200
    edit_seed: int = 202
    exclude_edited: bool = False
    workers: int = 1
    tune_edits: int = 200
    tune_seed: int = 101
    min_success: float = 0.95
    tune_grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_edits < 1 or self.tune_edits < 1 or self.workers < 1:
            raise ValueError("n_edits, tune_edits and workers must be positive")
        if not 0 < self.min_success <= 1:
            raise ValueError("min_success must lie in (0, 1]")
        for axis, values in self.tune_grid.items():
            if axis not in EditorConfig.__dataclass_fields__:
                raise ValueError(f"tune_grid: unknown editor field {axis!r}")
            if not isinstance(values, list) or not values:
                raise ValueError(f"tune_grid: {axis} needs a non-empty list")


@dataclass(frozen=True)
class RunConfig:
    model: dict
    data: DataConfig
    train: TrainConfig
    editor: EditorConfig
    eval: EvalConfig
    seed: int = 0
    out_dir: str = "."
    teacher: str | None = None
    extra_block: int | None = None

    def model_config(self, train: Dataset) -> ModelConfig:
        d = {"input_dim": train.dim, "num_classes": train.num_classes, **self.model}
        return ModelConfig.from_dict(d)

    def resolve(self, path) -> Path:
        return Path(self.out_dir) / path

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("editor")
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "data": asdict(self.data),
            "train": {**train, "teacher": self.teacher, "extra_block": self.extra_block},
            "editor": self.editor.to_dict(),
            "eval": asdict(self.eval),
        }


SECTIONS = ("seed", "out_dir", "model", "data", "train", "editor", "eval")


def parse_run_config(d: Any) -> RunConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        editor = EditorConfig.from_dict(d.get("editor", {}))
    except (EditorConfigError, TypeError) as exc:
        raise ConfigError(f"editor: {exc}") from None
    model = dict(d.get("model", {}))
    try:
        # validate now with placeholder sizes; the real ones come from the data
        ModelConfig.from_dict({"input_dim": 1, "num_classes": 2, **model})
    except (ModelConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    train_d = dict(d.get("train", {}))
    teacher = train_d.pop("teacher", None)
    extra_block = train_d.pop("extra_block", None)
    if "editor" in train_d:
        raise ConfigError("train: the editor lives in its own section")
    train = _strict(TrainConfig, "train", {**train_d, "editor": editor})
    if train.base_loss == "distill_kl" and teacher is None:
        raise ConfigError("train: distill_kl requires a teacher checkpoint")
    if extra_block is not None and (not isinstance(extra_block, int) or extra_block < 1):
        raise ConfigError("train: extra_block must be a positive integer")
    return RunConfig(
        model=model,
        data=_strict(DataConfig, "data", d.get("data", {})),
        train=train,
        editor=editor,
        eval=_strict(EvalConfig, "eval", d.get("eval", {})),
        seed=seed,
        out_dir=str(d.get("out_dir", ".")),
        teacher=teacher,
        extra_block=extra_block,
    )


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_run_config(raw)
