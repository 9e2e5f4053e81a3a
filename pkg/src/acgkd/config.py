"""Flat key=value run configuration.

Every knob of a run lives in ``RunConfig``. Files hold one ``key = value`` per
line (``#`` starts a comment); command-line overrides use the same keys. The
resolved config is written next to the run outputs so a run can be repeated
from that file alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .distillation import BetaSchedule, DistillConfig
from .generation import CurriculumSchedule, GenConfig
from .models import ModelSpec, TeacherConfig


class ConfigError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # data
    dataset: str = "MUTAG"
    data_root: str = ""
    degree_scheme: str = "onehot-degree"
    max_degree: int = 135
    split_ratio: float = 0.7
    split_seed: int = 0
    # models
    teacher: str = "GCN-5-64"
    student: str = "GCN-3-32"
    dropout: float = 0.5
    # teacher training
    teacher_epochs: int = 200
    teacher_lr: float = 0.01
    teacher_batch_size: int = 32
    teacher_weight_decay: float = 0.0
    teacher_lr_schedule: str = "cosine"
    # generation
    num_batches: int = 20
    m_graphs: int = 32
    n_nodes: int = 0  # 0: rounded mean graph size of the dataset
    num_loops: int = 1800
    lr_struct: float = 1.0
    lr_feat: float = 0.01
    lr_decay: float = 0.999
    Q: int = 1
    rho: float = 1.0
    gate_l1_weight: float = 0.01
    noise_kind: str = "gumbel"
    lambda_bc: float = 2.0 / 3.0
    xi: bool = True
    resample_noise: bool = False
    trace_stride: int = 1
    grad_clip: float = 10.0
    curriculum: bool = True
    k_begin: float = 0.1
    k_end: float = 0.9
    lambda_final: float = 1.0
    export_graphs: int = 32
    # distillation
    method: str = "acgkd"  # acgkd | rg | dg | bernoulli
    epochs: int = 400
    alpha_div: float = 1.0
    alpha_mse: float = 0.1
    mu0: float = 0.0
    mu_slope: float = 0.05
    lr: float = 0.01
    lr_schedule: str = "linear"
    temp_lr: float = 0.01
    tau_min: float = 1.0
    tau_max: float = 8.0
    beta_max: float = 1.0
    beta_min: float = 0.0
    heads: int = 4
    dt: bool = True
    fixed_tau: float = 2.0
    cl: bool = True
    cr: bool = True
    eval_every: int = 1
    # benchmark
    bench_seeds: int = 3
    bench_repeats: int = 200
    # run plumbing
    seed: int = 0
    outdir: str = "runs"
    run_id: str = ""
    teacher_ckpt: str = ""
    student_ckpt: str = ""
    pseudo: str = ""
    parallel_seeds: int = 1

    def validate(self) -> "RunConfig":
        try:
            self.teacher_spec(1, 1)
            self.student_spec(1, 1)
            self.gen_config()
            self.curriculum_schedule()
            self.distill_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must be in (0, 1)")
        if self.method not in ("acgkd", "rg", "dg", "bernoulli"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.degree_scheme not in ("onehot-degree", "constant"):
            raise ConfigError(f"unknown degree scheme {self.degree_scheme!r}")
        if self.teacher_lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown teacher lr schedule {self.teacher_lr_schedule!r}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        for key in ("num_batches", "m_graphs", "teacher_epochs", "teacher_batch_size", "bench_seeds",
                    "parallel_seeds"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.n_nodes < 0:
            raise ConfigError("n_nodes must be >= 0")
        return self

    # -- views onto the module configs ------------------------------------

    def teacher_spec(self, num_classes: int, input_dim: int) -> ModelSpec:
        return ModelSpec.parse(self.teacher, num_classes, input_dim)

    def student_spec(self, num_classes: int, input_dim: int) -> ModelSpec:
        return ModelSpec.parse(self.student, num_classes, input_dim)

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(self.teacher_epochs, self.teacher_lr, self.teacher_batch_size,
                             self.teacher_weight_decay, self.dropout, self.teacher_lr_schedule, self.eval_every)

    def gen_config(self) -> GenConfig:
        return GenConfig(self.num_loops, self.lr_struct, self.lr_feat, self.lr_decay, self.Q, self.rho,
                         self.gate_l1_weight, self.noise_kind, self.lambda_bc, self.xi, self.resample_noise,
                         self.trace_stride, self.grad_clip)

    def curriculum_schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.k_begin, self.k_end, self.num_batches, lambda_final=self.lambda_final,
                                  enabled=self.curriculum)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            epochs=self.epochs, alpha_div=self.alpha_div, alpha_mse=self.alpha_mse, mu0=self.mu0,
            mu_slope=self.mu_slope, lr=self.lr, lr_schedule=self.lr_schedule, temp_lr=self.temp_lr,
            beta=BetaSchedule(self.beta_max, self.beta_min, self.epochs), tau_min=self.tau_min,
            tau_max=self.tau_max, fixed_tau=None if self.dt else self.fixed_tau, use_cl=self.cl,
            reuse_classifier=self.cr, heads=self.heads, eval_every=self.eval_every)

    # -- text form ----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


_TYPES = {f.name: {"str": str, "int": int, "float": float, "bool": bool}[f.type] for f in fields(RunConfig)}


def parse_pairs(lines, source: str = "<args>") -> dict:
    """Parse ``key = value`` lines into typed values; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, _TYPES[key])
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value, _TYPES[key]) if isinstance(value, str) else value
    return dataclasses.replace(RunConfig(), **values).validate()
