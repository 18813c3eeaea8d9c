"""Teacher distillation in the infinite-data regime.

Every step draws fresh standard-normal inputs, labels them with a frozen
random-weight teacher and takes one Adam step on ``MSE + lam * penalty``.
lmKAN students follow a four-phase schedule:

I    gamma = 0 (pure MLP mode), strong Hessian penalty ``lambda_init``
II   gamma ramps linearly to ``gamma_target`` then holds; penalty still strong
III  penalty decays geometrically from ``lambda_init`` to ``lambda_target``
IV   everything held; learning rate constant, then decayed over the tail

Random streams: one ``numpy.random.SeedSequence`` per run is spawned into
independent ``init``, ``data`` and ``eval`` PCG64 generators; normal variates
come from numpy's ziggurat sampler.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .cost import deployed_flops, matched_mlp_width
from .errors import ConfigError, TrainingDivergedError
from .hessian import model_penalty_and_grads
from .model import Model, build_lmkan_student, build_mlp, build_mlp_student

log = logging.getLogger(__name__)

__all__ = [
    "TeacherSpec",
    "StudentSpec",
    "PhaseConfig",
    "TrainConfig",
    "AdamState",
    "Adam",
    "TrainResult",
    "make_teacher",
    "make_streams",
    "sample_inputs",
    "phase_schedule",
    "phase_of",
    "build_student",
    "train_distill",
    "evaluate_mse",
    "sweep_grid_resolution",
    "plane_fit_residual",
    "write_history_csv",
    "HISTORY_FIELDS",
]

HISTORY_FIELDS = ("step", "phase", "gamma", "lambda", "lr", "pure_loss", "total_loss")
NEARLY_ZERO_LAMBDA = 1e-20


@dataclass(frozen=True)
class TeacherSpec:
    in_dim: int = 8
    out_dim: int = 1
    hidden_dim: int = 64
    depth: int = 3
    weight_scale: float = 3.0
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        for name in ("in_dim", "out_dim", "hidden_dim", "depth"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be positive", field=f"teacher.{name}")
        if not self.weight_scale >= 0:
            raise ConfigError("must be >= 0", field="teacher.weight_scale")


@dataclass(frozen=True)
class StudentSpec:
    kind: str = "lmkan"  # or "mlp"
    hidden_dim: int = 32
    n_hidden: int = 2
    G: int = 12
    precond: str = "relu_first"
    init_scale: float | None = None
    input_bn: bool = False
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in ("lmkan", "mlp"):
            raise ConfigError(f"unknown student kind {self.kind!r}", field="student.kind")
        if self.hidden_dim <= 0 or self.n_hidden <= 0:
            raise ConfigError("dimensions must be positive", field="student.hidden_dim")
        if self.kind == "lmkan":
            if self.hidden_dim % 2:
                raise ConfigError(f"lmKAN width must be even, got {self.hidden_dim}",
                                  field="student.hidden_dim")
            if self.G < 3:
                raise ConfigError(f"G must be >= 3, got {self.G}", field="student.G")
            if self.precond not in ("relu_first", "relu_last", "none"):
                raise ConfigError(f"unknown mode {self.precond!r}", field="student.precond")


@dataclass(frozen=True)
class PhaseConfig:
    """Phase lengths and schedules.  ``gamma_ramp_steps`` is the ramp part of phase II."""

    steps: tuple = (200, 1800, 2000, 16000)
    gamma_ramp_steps: int | None = None
    gamma_target: float = 0.3
    lambda_init: float = 1.0
    lambda_target: float = NEARLY_ZERO_LAMBDA
    lr: float = 1e-3
    lr_decay_steps: int | None = None
    lr_final_factor: float = 0.01
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if len(self.steps) != 4 or min(self.steps) < 0:
            raise ConfigError("need four non-negative phase lengths", field="phases.steps")
        if self.gamma_ramp_steps is None:
            object.__setattr__(self, "gamma_ramp_steps", self.steps[1] // 2)
        if not 0 <= self.gamma_ramp_steps <= self.steps[1]:
            raise ConfigError("ramp must fit inside phase II", field="phases.gamma_ramp_steps")
        if not 0.0 <= self.gamma_target <= 1.0:
            raise ConfigError("must lie in [0, 1]", field="phases.gamma_target")
        if not (self.lambda_init >= self.lambda_target >= 0.0):
            raise ConfigError("need lambda_init >= lambda_target >= 0", field="phases.lambda_init")
        if self.lr_decay_steps is None:
            object.__setattr__(self, "lr_decay_steps", self.steps[3] // 4)
        if not 0 <= self.lr_decay_steps <= self.steps[3]:
            raise ConfigError("decay must fit inside phase IV", field="phases.lr_decay_steps")
        if not self.lr > 0 or not self.lr_final_factor > 0:
            raise ConfigError("learning rates must be positive", field="phases.lr")
        if self.batch_size < 2:
            raise ConfigError("batch norm needs batches of >= 2", field="phases.batch_size")

    @property
    def total_steps(self) -> int:
        return sum(self.steps)

    @property
    def boundaries(self):
        b = np.cumsum((0,) + self.steps)
        return tuple(int(v) for v in b)


@dataclass(frozen=True)
class TrainConfig:
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    student: StudentSpec = field(default_factory=StudentSpec)
    phases: PhaseConfig = field(default_factory=PhaseConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_samples: int = 16384
    eval_seed: int = 12345
    ema_alpha: float = 0.01


def phase_of(step, cfg: PhaseConfig) -> int:
    b = cfg.boundaries
    for k in range(4):
        if step < b[k + 1]:
            return k + 1
    return 4


def phase_schedule(step, cfg: PhaseConfig):
    """``(gamma, lambda, lr)`` at ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    b = cfg.boundaries
    phase = phase_of(step, cfg)
    lr = cfg.lr
    if phase == 1:
        return 0.0, cfg.lambda_init, lr
    if phase == 2:
        t = step - b[1]
        ramp = cfg.gamma_ramp_steps
        gamma = cfg.gamma_target if t >= ramp else cfg.gamma_target * t / ramp
        return gamma, cfg.lambda_init, lr
    gamma = cfg.gamma_target
    lam_end = cfg.lambda_target
    if phase == 3:
        if cfg.lambda_init == 0.0:
            return gamma, 0.0, lr
        floor = max(lam_end, NEARLY_ZERO_LAMBDA)
        frac = (step - b[2]) / cfg.steps[2]
        lam = cfg.lambda_init * (floor / cfg.lambda_init) ** frac
        return gamma, max(lam, lam_end), lr
    decay_start = b[4] - cfg.lr_decay_steps
    if step >= decay_start and cfg.lr_decay_steps > 0:
        frac = (step - decay_start + 1) / cfg.lr_decay_steps
        lr = cfg.lr * cfg.lr_final_factor ** min(frac, 1.0)
    return gamma, lam_end, lr


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _flat_views(*arrays):
    """1D views sharing memory with each array, or None.

    Works for transposed views such as a layer's ``P``: every array is put
    back into its memory order, which must be the same for all of them.
    """
    order = np.argsort([-abs(st) for st in arrays[0].strides], kind="stable")
    out = []
    for a in arrays:
        t = a.transpose(order)
        if not t.flags.c_contiguous:
            return None
        out.append(t.reshape(-1))
    return out


class Adam:
    """Bias-corrected Adam over named numpy arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = AdamState(lr, beta1, beta2, eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def step(self, params: dict, grads: dict) -> None:
        st = self.state
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for key, p in params.items():
            g = grads[key]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
            if key not in st.m:
                st.m[key] = np.zeros_like(p)
                st.v[key] = np.zeros_like(p)
            m, v = st.m[key], st.v[key]
            flat = _flat_views(p, g, m, v)
            if flat is not None:
                kernels.adam_update(*flat, st.beta1, st.beta2, st.lr / bc1, st.eps, 1.0 / bc2)
                continue
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p -= (st.lr / bc1) * m / (np.sqrt(v / bc2) + st.eps)


def make_streams(seed):
    """Independent ``init``, ``data`` and ``eval`` generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    return dict(zip(("init", "data", "eval"), (np.random.Generator(np.random.PCG64(c)) for c in children)))


def sample_inputs(rng: np.random.Generator, batch, dim):
    return rng.standard_normal((batch, dim))


def make_teacher(spec: TeacherSpec) -> Model:
    """Random tanh MLP with fan-in-uniform init and weight matrices scaled by ``weight_scale``."""
    rng = np.random.default_rng(spec.seed)
    return build_mlp(spec.in_dim, spec.hidden_dim, spec.out_dim, spec.depth,
                     spec.activation, rng, spec.weight_scale)


def build_student(spec: StudentSpec, in_dim, out_dim, rng) -> Model:
    if spec.kind == "lmkan":
        return build_lmkan_student(in_dim, spec.hidden_dim, out_dim, spec.G, spec.n_hidden,
                                   spec.precond, rng, spec.init_scale, spec.bn_momentum, spec.input_bn)
    return build_mlp_student(in_dim, spec.hidden_dim, out_dim, spec.n_hidden, rng, spec.bn_momentum)


@dataclass
class TrainResult:
    model: Model
    history: list
    final_mse: float
    flops: int

    def smoothed(self, key="pure_loss", alpha=0.01):
        """Exponential moving average of a history column."""
        out = np.empty(len(self.history))
        acc = None
        for i, rec in enumerate(self.history):
            acc = rec[key] if acc is None else (1 - alpha) * acc + alpha * rec[key]
            out[i] = acc
        return out


def _predict(model, X, batch=8192):
    return np.concatenate([model.forward(X[i:i + batch]) for i in range(0, len(X), batch)])


def evaluate_mse(model: Model, teacher: Model, n_samples=16384, seed=12345) -> float:
    """MSE on a fresh deterministic stream with inference-mode batch norms."""
    rng = np.random.default_rng(seed)
    X = sample_inputs(rng, n_samples, teacher.in_dim)
    diff = _predict(model, X) - _predict(teacher, X)
    return float(np.mean(diff * diff))


def train_distill(student, teacher: Model, cfg: TrainConfig, log_every=0) -> TrainResult:
    """Fit ``student`` (a :class:`StudentSpec` or a prebuilt :class:`Model`) to ``teacher``."""
    ph = cfg.phases
    streams = make_streams(ph.seed)
    if isinstance(student, StudentSpec):
        model = build_student(student, teacher.in_dim, teacher.out_dim, streams["init"])
    else:
        model = student
    flops = deployed_flops(model)
    opt = Adam(ph.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = {key: arr for key, _, _, arr in model.named_params()}
    owners = {key: (mod, name) for key, mod, name, _ in model.named_params()}
    has_kan = bool(model.lmkan_blocks())
    data = streams["data"]
    history = []
    for step in range(ph.total_steps):
        phase = phase_of(step, ph)
        gamma, lam, lr = phase_schedule(step, ph)
        if has_kan:
            model.set_gamma(gamma)
        else:
            lam = 0.0
        X = sample_inputs(data, ph.batch_size, teacher.in_dim)
        T = teacher.forward(X)
        Y = model.forward(X, training=True)
        diff = Y - T
        with np.errstate(over="ignore", invalid="ignore"):
            pure = float(np.mean(diff * diff))
        if not math.isfinite(pure):
            raise TrainingDivergedError(phase, step, pure, pure)
        model.backward((2.0 / diff.size) * diff)
        penalty = 0.0
        if lam > 0.0:
            penalty, pgrads = model_penalty_and_grads(model)
            for block, g in pgrads:
                block.grads["P"] += lam * g
        total = pure + lam * penalty
        if not math.isfinite(total):
            raise TrainingDivergedError(phase, step, pure, total)
        grads = {key: owners[key][0].grads[owners[key][1]] for key in params}
        opt.lr = lr
        opt.step(params, grads)
        history.append({
            "step": step, "phase": phase, "gamma": gamma, "lambda": lam, "lr": lr,
            "pure_loss": pure, "total_loss": total, "penalty": penalty,
        })
        if log_every and step % log_every == 0:
            log.info("step %d phase %d gamma %.3f lambda %.3g lr %.3g pure %.5g total %.5g",
                     step, phase, gamma, lam, lr, pure, total)
    final = evaluate_mse(model, teacher, cfg.eval_samples, cfg.eval_seed)
    if not math.isfinite(final):
        raise TrainingDivergedError(4, ph.total_steps, final, final)
    return TrainResult(model, history, final, flops)


def sweep_grid_resolution(cfg: TrainConfig, G_values, teacher=None):
    """Train one lmKAN student per ``G`` at a fixed budget; failed rows carry the error."""
    teacher = teacher if teacher is not None else make_teacher(cfg.teacher)
    rows = []
    for G in G_values:
        try:
            spec = replace(cfg.student, kind="lmkan", G=int(G))
            res = train_distill(spec, teacher, cfg)
            rows.append({"G": int(G), "final_mse": res.final_mse, "error": ""})
        except Exception as exc:  # keep sweeping
            log.warning("G=%s failed: %s", G, exc)
            rows.append({"G": int(G), "final_mse": float("nan"), "error": str(exc)})
    return rows


def matched_mlp_spec(cfg: TrainConfig, lmkan_flops) -> StudentSpec:
    """MLP baseline spec whose main-term FLOPs first reach the lmKAN student's."""
    t = cfg.teacher
    w = matched_mlp_width(lmkan_flops, t.in_dim, t.out_dim, cfg.student.n_hidden)
    return replace(cfg.student, kind="mlp", hidden_dim=w)


def plane_fit_residual(grid, sheets) -> np.ndarray:
    """Relative RMS residual of a least-squares plane fit to each sheet.

    ``sheets`` has shape ``(G+1, G+1, *batch)``; the result is residual RMS
    divided by coefficient RMS, per sheet.
    """
    pts = grid.points
    n = len(pts)
    A = np.column_stack([np.repeat(pts, n), np.tile(pts, n), np.ones(n * n)])
    flat = sheets.reshape(n * n, -1)
    coef, *_ = np.linalg.lstsq(A, flat, rcond=None)
    resid = flat - A @ coef
    rms_r = np.sqrt(np.mean(resid ** 2, axis=0))
    rms_c = np.sqrt(np.mean(flat ** 2, axis=0))
    return (rms_r / np.maximum(rms_c, 1e-300)).reshape(sheets.shape[2:])


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec[k] if k in ("step", "phase") else repr(float(rec[k])) for k in HISTORY_FIELDS])
