"""Feed-forward classifiers with named parameter groups.

Each hidden layer is its own group (``layer_0``, ``layer_1``, ...), followed by
an optional residual ``extra`` block and the output ``head``.  Editors can be
restricted to a subset of groups through :func:`select_editable`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128)
    num_classes: int = 10
    activation: str = "relu"
    extra_hidden: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ModelConfigError("input_dim must be positive")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ModelConfigError("need at least one hidden layer, all widths positive")
        if self.num_classes < 2:
            raise ModelConfigError("num_classes must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ModelConfigError(f"unknown activation {self.activation!r}")
        if self.extra_hidden is not None and self.extra_hidden < 1:
            raise ModelConfigError("extra_hidden must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ModelConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def group_names(self) -> list[str]:
        names = [f"layer_{i}" for i in range(len(self.hidden_dims))]
        if self.extra_hidden is not None:
            names.append("extra")
        return names + ["head"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParamSet:
    """Ordered parameter groups plus the set of groups an editor may touch.

    Tensors are never modified in place; updates build a new ParamSet, so
    sharing tensors between sets is safe.
    """

    groups: dict[str, dict[str, Tensor]]
    editable_mask: frozenset = field(default=None)

    def __post_init__(self):
        if self.editable_mask is None:
            self.editable_mask = frozenset(self.groups)
        self.editable_mask = frozenset(self.editable_mask)
        missing = self.editable_mask - set(self.groups)
        if missing:
            raise KeyError(f"editable groups not in ParamSet: {sorted(missing)}")

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        for group, tensors in self.groups.items():
            for name, t in tensors.items():
                yield f"{group}.{name}", t

    def __getitem__(self, qualname: str) -> Tensor:
        group, name = qualname.split(".", 1)
        return self.groups[group][name]

    def __len__(self) -> int:
        return len(list(iter(self)))

    def names(self) -> list[str]:
        return [n for n, _ in self]

    def editable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self if n.split(".", 1)[0] in self.editable_mask]

    def replace(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        groups = {g: dict(ts) for g, ts in self.groups.items()}
        for qualname, t in updates.items():
            group, name = qualname.split(".", 1)
            if name not in groups.get(group, {}):
                raise KeyError(qualname)
            groups[group][name] = t
        return ParamSet(groups, self.editable_mask)

    def map(self, fn) -> "ParamSet":
        return ParamSet(
            {g: {n: fn(t) for n, t in ts.items()} for g, ts in self.groups.items()},
            self.editable_mask,
        )

    def copy(self) -> "ParamSet":
        """Deep copy with fresh leaves; the copy shares no arrays."""
        return self.map(lambda t: Tensor(t.data.copy(), requires_grad=t.requires_grad))

    def detach(self) -> "ParamSet":
        return self.map(lambda t: Tensor(t.data))

    def as_leaves(self) -> "ParamSet":
        return self.map(lambda t: Tensor(t.data, requires_grad=True))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], editable_mask=None, requires_grad=False) -> "ParamSet":
        groups: dict[str, dict[str, Tensor]] = {}
        for qualname, a in arrays.items():
            group, name = qualname.split(".", 1)
            groups.setdefault(group, {})[name] = Tensor(a, requires_grad=requires_grad)
        return cls(groups, editable_mask)

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact comparison of names, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays().values(), other.arrays().values())
        )


def select_editable(params: ParamSet, groups: Iterable[str]) -> ParamSet:
    """View of ``params`` whose editor updates are limited to ``groups``."""
    groups = frozenset(groups)
    if not groups:
        raise ValueError("select_editable: no groups selected, nothing to edit")
    unknown = groups - set(params.groups)
    if unknown:
        raise KeyError(f"unknown parameter groups: {sorted(unknown)}")
    return ParamSet(params.groups, groups)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    groups: dict[str, dict[str, Tensor]] = {}
    width = config.input_dim
    for i, h in enumerate(config.hidden_dims):
        groups[f"layer_{i}"] = {
            "weight": Tensor(_glorot(rng, width, h, dtype)),
            "bias": Tensor(np.zeros(h, dtype)),
        }
        width = h
    if config.extra_hidden is not None:
        groups["extra"] = extra_block_params(width, config.extra_hidden, rng, dtype)
    groups["head"] = {
        "weight": Tensor(_glorot(rng, width, config.num_classes, dtype)),
        "bias": Tensor(np.zeros(config.num_classes, dtype)),
    }
    return ParamSet(groups)


def extra_block_params(width: int, hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    # output projection starts at zero so the block is an exact identity
    return {
        "in_weight": Tensor(_glorot(rng, width, hidden, dtype)),
        "in_bias": Tensor(np.zeros(hidden, dtype)),
        "out_weight": Tensor(np.zeros((hidden, width), dtype)),
        "out_bias": Tensor(np.zeros(width, dtype)),
    }


def with_extra_block(config: ModelConfig, params: ParamSet, hidden: int, seed: int) -> tuple[ModelConfig, ParamSet]:
    """Insert a zero-initialized residual block before the head."""
    if config.extra_hidden is not None:
        raise ModelConfigError("model already has an extra block")
    new_cfg = ModelConfig(**{**config.to_dict(), "extra_hidden": hidden})
    rng = np.random.default_rng(seed)
    groups = {g: dict(ts) for g, ts in params.groups.items() if g != "head"}
    groups["extra"] = extra_block_params(config.hidden_dims[-1], hidden, rng, np.dtype(config.dtype))
    groups["head"] = dict(params.groups["head"])
    return new_cfg, ParamSet(groups)


def as_batch(config: ModelConfig, batch) -> Tensor:
    if isinstance(batch, Tensor):
        x = batch
    else:
        x = Tensor(np.asarray(batch, dtype=config.dtype))
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ad.ShapeError("forward", x.shape, (None, config.input_dim))
    return x


def forward(config: ModelConfig, params: ParamSet, batch) -> Tensor:
    """Unnormalized class scores, shape ``B x num_classes``."""
    act = ACTIVATIONS[config.activation]
    h = as_batch(config, batch)
    for i in range(len(config.hidden_dims)):
        layer = params.groups[f"layer_{i}"]
        h = act(h @ layer["weight"] + layer["bias"])
    if config.extra_hidden is not None:
        blk = params.groups["extra"]
        inner = act(h @ blk["in_weight"] + blk["in_bias"])
        h = h + (inner @ blk["out_weight"] + blk["out_bias"])
    head = params.groups["head"]
    return h @ head["weight"] + head["bias"]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return ad.neg(ad.mean(ad.gather_rows(ad.log_softmax(logits), labels)))


def predict(config: ModelConfig, params: ParamSet, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Predicted class indices, computed without building a graph."""
    plain = params.detach()
    out = [
        np.argmax(forward(config, plain, features[i:i + chunk]).data, axis=1)
        for i in range(0, len(features), chunk)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def log_probs(config: ModelConfig, params: ParamSet, features: np.ndarray) -> np.ndarray:
    return ad.log_softmax(forward(config, params.detach(), features)).data
