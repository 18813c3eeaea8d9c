"""JSON run configuration.

Top-level sections: ``teacher``, ``student``, ``phases``, ``optimizer``, ``io``.
Unknown keys are rejected so typos surface as configuration errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .training import PhaseConfig, StudentSpec, TeacherSpec, TrainConfig

__all__ = ["IOConfig", "load_config", "parse_config"]


@dataclass(frozen=True)
class IOConfig:
    model_out: str = "model.lmk"
    history_csv: str = "history.csv"
    dtype: str = "f64"


_OPTIMIZER_KEYS = {"lr", "beta1", "beta2", "eps", "batch_size", "lr_decay_steps", "lr_final_factor"}


def _section(cls, raw, name, rename=None):
    raw = dict(raw or {})
    rename = rename or {}
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        target = rename.get(key, key)
        if target not in allowed:
            raise ConfigError("unknown key", field=f"{name}.{key}")
        kwargs[target] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=name) from None


def _check_ints(obj, name, keys):
    for k in keys:
        v = getattr(obj, k)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"must be an integer, got {v!r}", field=f"{name}.{k}")


def parse_config(raw: dict):
    """Return ``(TrainConfig, IOConfig)`` from a decoded JSON document."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - {"teacher", "student", "phases", "optimizer", "io", "eval"}
    if unknown:
        raise ConfigError("unknown section", field=sorted(unknown)[0])
    teacher = _section(TeacherSpec, raw.get("teacher"), "teacher")
    _check_ints(teacher, "teacher", ("in_dim", "out_dim", "hidden_dim", "depth", "seed"))
    student = _section(StudentSpec, raw.get("student"), "student")
    _check_ints(student, "student", ("hidden_dim", "n_hidden", "G"))
    if student.kind == "lmkan" and teacher.in_dim % 2:
        raise ConfigError(f"lmKAN students pair inputs; in_dim {teacher.in_dim} is odd",
                          field="teacher.in_dim")

    opt = dict(raw.get("optimizer") or {})
    for key in opt:
        if key not in _OPTIMIZER_KEYS:
            raise ConfigError("unknown key", field=f"optimizer.{key}")
    phase_raw = dict(raw.get("phases") or {})
    for key in ("lr", "batch_size", "lr_decay_steps", "lr_final_factor"):
        if key in opt:
            phase_raw[key] = opt.pop(key)
    phases = _section(PhaseConfig, phase_raw, "phases")
    _check_ints(phases, "phases", ("batch_size", "seed", "gamma_ramp_steps", "lr_decay_steps"))

    ev = dict(raw.get("eval") or {})
    extra = {}
    for key, target in (("samples", "eval_samples"), ("seed", "eval_seed")):
        if key in ev:
            extra[target] = ev.pop(key)
    if ev:
        raise ConfigError("unknown key", field=f"eval.{sorted(ev)[0]}")
    adam = {}
    for key, target in (("beta1", "beta1"), ("beta2", "beta2"), ("eps", "adam_eps")):
        if key in opt:
            adam[target] = opt.pop(key)
    cfg = TrainConfig(teacher=teacher, student=student, phases=phases, **adam, **extra)
    io = _section(IOConfig, raw.get("io"), "io")
    if io.dtype not in ("f64", "f32"):
        raise ConfigError("must be 'f64' or 'f32'", field="io.dtype")
    return cfg, io


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_config(raw)
