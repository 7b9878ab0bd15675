"""Command-line entry point.

Exit codes: 0 ok, 2 config/input error, 3 divergence, 4 edit failure,
5 infeasible tuning.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_run_config
from .constraints import ConstraintError, EditConstraint, TargetSampler, sample_edits
from .data_io import FormatError, load_matrix, load_model_checkpoint, save_matrix, save_model_checkpoint
from .editors import EditError, EditorConfig, EditorConfigError, TuningError, edit, expand_grid, tune_editor
from .evaluation import EvaluationError, descriptor_matrix, evaluate_edits, explained_variance
from .models import with_extra_block
from .training import DivergenceError, fine_tune, train

OK, INPUT_ERROR, DIVERGED, EDIT_FAILED, INFEASIBLE = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _fresh(path: Path) -> Path:
    if path.exists():
        raise InputError(f"refusing to overwrite {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_text(path: Path, text: str) -> None:
    _fresh(path).write_text(text)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    return load_model_checkpoint(path)


def _resolve_editor(name: str | None, cfg: RunConfig, ckpt) -> EditorConfig:
    """``name`` is a variant, ``checkpoint``, or a JSON file written by ``tune``."""
    if name is None or name == "checkpoint":
        return ckpt.editor
    if name == "config":
        return cfg.editor
    path = Path(name)
    if path.suffix == ".json":
        if not path.is_file():
            raise InputError(f"editor file not found: {path}")
        return EditorConfig.from_dict(json.loads(path.read_text()))
    return replace(cfg.editor, variant=name)


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = cfg.resolve(args.out)
    metrics = cfg.resolve(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    _fresh(out), _fresh(metrics)
    train_set, _ = cfg.data.load()
    model = cfg.model_config(train_set)
    train_cfg = cfg.train
    init = None
    if args.resume:
        resumed = _load_ckpt(args.resume)
        if resumed.model != model:
            raise InputError("resume checkpoint does not match the model config")
        init = resumed.params
        train_cfg = replace(train_cfg, editor=resumed.editor)
    if cfg.teacher is not None:
        teacher = _load_ckpt(cfg.teacher)
        student_model, student = teacher.model, teacher.params.copy()
        if cfg.extra_block is not None:
            student_model, student = with_extra_block(teacher.model, student, cfg.extra_block, seed)
        if init is not None:
            student = init
        params, editor, log = fine_tune(teacher.model, teacher.params, train_set, train_cfg, seed,
                                        student_model=student_model, student_init=student)
        model = student_model
    else:
        params, editor, log = train(model, train_set, train_cfg, seed, init=init)
    run = cfg.to_dict()
    run["seed"] = seed
    save_model_checkpoint(out, model, params, editor, run)
    metrics.write_text(log.to_jsonl())
    return OK


def _edit_sets(cfg: RunConfig, control, n: int, seed: int):
    return sample_edits(control, n, TargetSampler(seed=seed))


def cmd_eval_edits(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cfg = load_run_config(args.config)
    editor = _resolve_editor(args.editor, cfg, ckpt)
    if args.k is not None:
        editor = replace(editor, k=args.k)
    if args.layers:
        editor = replace(editor, groups=tuple(args.layers.split(",")))
        unknown = set(editor.groups) - set(ckpt.params.groups)
        if unknown:
            raise InputError(f"unknown layer groups {sorted(unknown)}")
    report_path = cfg.resolve(args.report)
    desc_path = cfg.resolve(args.descriptors) if args.descriptors else None
    _fresh(report_path)
    if desc_path is not None:
        _fresh(desc_path)
    _, control = cfg.data.load()
    edits = _edit_sets(cfg, control, args.n or cfg.eval.n_edits, cfg.eval.edit_seed)
    workers = args.workers or cfg.eval.workers
    report = evaluate_edits(ckpt.model, ckpt.params, edits, editor, control,
                            exclude_edited=cfg.eval.exclude_edited, workers=workers)
    report_path.write_text(report.to_json() + "\n")
    if desc_path is not None:
        save_matrix(desc_path, descriptor_matrix(ckpt.model, ckpt.params, edits, editor, control))
    return OK


def _read_vector(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input not found: {path}")
    try:
        if path.suffix == ".npy":
            x = np.load(path, allow_pickle=False)
        else:
            x = np.array(path.read_text().replace(",", " ").split(), dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"cannot parse input: {exc}") from None
    if x.ndim != 1 and not (x.ndim == 2 and x.shape[0] == 1):
        raise InputError("input must hold exactly one feature vector")
    return x.reshape(-1)


def cmd_edit(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    x = _read_vector(args.input)
    if len(x) != ckpt.model.input_dim:
        raise InputError(f"input has {len(x)} features, model expects {ckpt.model.input_dim}")
    if not 0 <= args.target < ckpt.model.num_classes:
        raise InputError(f"target must lie in [0, {ckpt.model.num_classes})")
    out = Path(args.out)
    _fresh(out)
    editor = ckpt.editor if args.k is None else replace(ckpt.editor, k=args.k)
    edited, trace = edit(ckpt.model, ckpt.params, EditConstraint(x, args.target), editor)
    print(json.dumps(trace.to_dict(), sort_keys=True))
    if not trace.satisfied:
        return _fail(f"edit unsatisfied after {trace.steps_taken} steps", EDIT_FAILED)
    save_model_checkpoint(out, ckpt.model, edited, ckpt.editor, ckpt.run)
    return OK


def cmd_tune(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    cfg = load_run_config(args.config)
    report_path = cfg.resolve(args.report)
    _fresh(report_path)
    _, control = cfg.data.load()
    grid = expand_grid(cfg.editor, cfg.eval.tune_grid) if cfg.eval.tune_grid else [cfg.editor]
    edits = _edit_sets(cfg, control, cfg.eval.tune_edits, cfg.eval.tune_seed)
    try:
        result = tune_editor(ckpt.model, ckpt.params, edits, control, grid,
                             k=cfg.editor.k, min_success=cfg.eval.min_success)
    except TuningError as exc:
        return _fail(str(exc), INFEASIBLE)
    report_path.write_text(json.dumps(result.best.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.candidates:
        _write_text(cfg.resolve(args.candidates), json.dumps(result.candidates, indent=2, sort_keys=True) + "\n")
    return OK


def cmd_analyze(args) -> int:
    if not Path(args.descriptors).is_file():
        raise InputError(f"descriptor file not found: {args.descriptors}")
    matrix = load_matrix(args.descriptors)
    report_path = Path(args.report)
    _fresh(report_path)
    curve = explained_variance(matrix, args.max_components)
    doc = {"rows": matrix.shape[0], "cols": matrix.shape[1], "explained_variance": curve}
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return OK


# -- wiring ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="editable", description="Train, edit and evaluate editable classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train or fine-tune a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="initialize from this checkpoint")
    p.add_argument("--metrics", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-edits", help="run independent edits and report drawdown")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--editor", help="variant name, 'checkpoint', 'config', or a tuned editor JSON")
    p.add_argument("--layers", help="comma-separated editable groups")
    p.add_argument("--k", type=int)
    p.add_argument("--report", required=True)
    p.add_argument("--descriptors", help="also write the EDDM descriptor matrix here")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval_edits)

    p = sub.add_parser("edit", help="apply one edit to a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="feature vector as text or .npy")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("tune", help="grid-search the editor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True, help="winning editor config (JSON)")
    p.add_argument("--candidates", help="per-candidate metrics (JSON)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("analyze", help="explained variance of a descriptor matrix")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--max-components", type=int)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return INPUT_ERROR if exc.code else OK
    try:
        return args.func(args)
    except DivergenceError as exc:
        return _fail(str(exc), DIVERGED)
    except EditError as exc:
        return _fail(str(exc), EDIT_FAILED)
    except TuningError as exc:
        return _fail(str(exc), INFEASIBLE)
    except (ConfigError, InputError, FormatError, EditorConfigError, ConstraintError,
            EvaluationError, ValueError, OSError) as exc:
        return _fail(str(exc), INPUT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
