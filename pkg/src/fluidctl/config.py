"""Run configuration: INI-style files merged with command-line overrides.

File format (``key = value`` lines under ``[section]`` headers)::

    [run]            env, seed, out
    [environment]    resolution, domain, F_max, T_max, controller_sample_stride,
                     source_center, source_width, Re, rho, u_ref, L_ref, dt,
                     buoyancy_coeff, inflow_speed, poisson_tol, poisson_max_iter
    [environment.ID] same keys, applied only when the run uses environment ID
    [loss]           beta_xy, beta_alpha, beta_xdot, beta_alphadot, beta_prox,
                     beta_F, beta_T, beta_dF, beta_dT
    [training]       n_i, horizon, lr0, lr_half_every, episode_length, clip_norm,
                     warmup_episodes, warmup_steps, val_every, val_targets,
                     val_steps, output_init_scale, history_np, history_pad, ablation
    [supervised]     sims, steps, n_i, lr0, lr_half_every, batch_size, val_every
    [controllers]    pid_cylinder_force, pid_box_force, pid_box_torque (P, D, I),
                     ls_numerator (n0, n1, n2), ls_denominator (d1, d2)
    [evaluation]     schedule, sims, targets, hold, steps, jobs

Precedence, lowest first: built-in defaults, ``[section]``,
``[environment.ID]``, command-line flags. The seed falls back to the
``FLUIDCTL_SEED`` environment variable when neither file nor flags set it.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import environment as env
from .baselines import (LOOPSHAPING, PID_BOX_FORCE, PID_BOX_TORQUE, PID_CYLINDER_FORCE,
                        LoopShapingCoeffs, PIDGains)
from .losses import ABLATIONS, LossWeights, apply_ablation
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 1."""


def _floats(n: int):
    def parse(text: str) -> tuple[float, ...]:
        parts = [p.strip() for p in str(text).split(",") if p.strip()]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    return parse


def _schedule(text: str) -> str:
    if text not in ("random", "nshape", "hold"):
        raise ValueError("expected random, nshape or hold")
    return text


def _ablation(text: str) -> str:
    if text not in ABLATIONS:
        raise ValueError(f"expected one of {', '.join(ABLATIONS)}")
    return text


_ENV_KEYS = dict(resolution=int, domain=float, F_max=float, T_max=float,
                 controller_sample_stride=int, source_center=float, source_width=float, Re=float,
                 rho=float, u_ref=float, L_ref=float, dt=float, buoyancy_coeff=float,
                 inflow_speed=float, poisson_tol=float, poisson_max_iter=int)

SCHEMA: dict[str, dict] = {
    "run": dict(env=str, seed=int, out=str),
    "environment": _ENV_KEYS,
    "loss": {f.name: float for f in dataclasses.fields(LossWeights) if f.name != "l"},
    "training": dict(n_i=int, horizon=int, lr0=float, lr_half_every=int, episode_length=int,
                     clip_norm=float, warmup_episodes=int, warmup_steps=int, val_every=int,
                     val_targets=int, val_steps=int, output_init_scale=float, history_np=int,
                     history_pad=int, ablation=_ablation),
    "supervised": dict(sims=int, steps=int, n_i=int, lr0=float, lr_half_every=int,
                       batch_size=int, val_every=int),
    "controllers": dict(pid_cylinder_force=_floats(3), pid_box_force=_floats(3),
                        pid_box_torque=_floats(3), ls_numerator=_floats(3),
                        ls_denominator=_floats(2)),
    "evaluation": dict(schedule=_schedule, sims=int, targets=int, hold=float, steps=int, jobs=int),
}

SUPERVISED_DEFAULTS = dict(sims=100, steps=500, n_i=150_000, lr0=0.01, lr_half_every=15_000,
                           batch_size=128, val_every=1000)
EVALUATION_DEFAULTS = dict(schedule="random", sims=5, targets=4, hold=100.0, steps=0, jobs=1)


def _section_schema(name: str) -> dict:
    if name.startswith("environment."):
        env_id = name.split(".", 1)[1]
        if env_id not in env.ENVIRONMENT_IDS:
            raise ConfigError(f"[{name}]: unknown environment {env_id!r}")
        return _ENV_KEYS
    if name not in SCHEMA:
        raise ConfigError(f"unknown section [{name}]; valid: {', '.join(SCHEMA)}, environment.<id>")
    return SCHEMA[name]


def convert(section: str, key: str, raw) -> object:
    schema = _section_schema(section)
    if key not in schema:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        return schema[key](raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, dict]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return {sec: {k: convert(sec, k, v) for k, v in cp.items(sec)} for sec in cp.sections()}


def load_file(path) -> dict[str, dict]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(p.read_text(), str(p))


@dataclass
class RunConfig:
    """Merged settings for one command."""

    env_id: str
    seed: int
    out: str = "out"
    environment: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    supervised: dict = field(default_factory=lambda: dict(SUPERVISED_DEFAULTS))
    controllers: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=lambda: dict(EVALUATION_DEFAULTS))

    def environment_config(self) -> env.EnvironmentConfig:
        try:
            return env.make_environment(self.env_id, self.environment)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def loss_weights(self, dof: int) -> LossWeights:
        base = LossWeights.defaults(dof)
        try:
            w = dataclasses.replace(base, l=self.training.get("horizon", 16), **self.loss)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return apply_ablation(w, self.training.get("ablation", "OVE"))

    def train_config(self) -> TrainConfig:
        cfg = self.environment_config()
        t = dict(self.training)
        kw = {k: t[k] for k in ("n_i", "lr0", "lr_half_every", "episode_length", "clip_norm",
                                "warmup_episodes", "warmup_steps", "val_every", "val_targets",
                                "val_steps", "output_init_scale") if k in t}
        kw["l"] = t.get("horizon", 16)
        if "history_np" in t or "history_pad" in t:
            n_p, pad = (1, 4) if cfg.dof == 2 else (2, 5)
            kw["history"] = (t.get("history_np", n_p), t.get("history_pad", pad))
        tc = TrainConfig.defaults(self.env_id, seed=self.seed, env_overrides=dict(self.environment),
                                  weights=self.loss_weights(cfg.dof), **kw)
        if tc.n_i < 0 or tc.l < 1 or tc.lr_half_every < 1:
            raise ConfigError("training needs n_i >= 0, horizon >= 1 and lr_half_every >= 1")
        return tc

    def pid_gains(self, cfg: env.EnvironmentConfig) -> tuple[PIDGains, ...]:
        c = self.controllers
        cyl = PIDGains(*c.get("pid_cylinder_force", dataclasses.astuple(PID_CYLINDER_FORCE)))
        box_f = PIDGains(*c.get("pid_box_force", dataclasses.astuple(PID_BOX_FORCE)))
        box_t = PIDGains(*c.get("pid_box_torque", dataclasses.astuple(PID_BOX_TORQUE)))
        if cfg.shape.kind == "cylinder":
            return (cyl,) * cfg.dof
        return (box_f, box_f, box_t)[: cfg.dof]

    def loopshaping(self) -> LoopShapingCoeffs:
        return LoopShapingCoeffs(tuple(self.controllers.get("ls_numerator", LOOPSHAPING.n)),
                                 tuple(self.controllers.get("ls_denominator", LOOPSHAPING.d)))

    def resolved_text(self) -> str:
        """Every effective setting, in the file format (reloadable)."""
        cfg = self.environment_config()
        tc = self.train_config()
        w = tc.weights
        envd = {k: getattr(cfg, k) for k in ("resolution", "domain", "F_max", "T_max",
                                             "controller_sample_stride", "source_center",
                                             "source_width", "Re")}
        envd.update({k: getattr(cfg.fluid, k) for k in _ENV_KEYS if hasattr(cfg.fluid, k) and k != "Re"})
        n_p, pad = tc.history or ((1, 4) if cfg.dof == 2 else (2, 5))
        gains = self.pid_gains(env.make_environment("BaseNR")) + self.pid_gains(env.make_environment("Base"))
        ls = self.loopshaping()
        sections = {
            "run": dict(env=self.env_id, seed=self.seed, out=self.out),
            "environment": envd,
            "loss": {f.name: getattr(w, f.name) for f in dataclasses.fields(w) if f.name != "l"},
            "training": dict(n_i=tc.n_i, horizon=tc.l, lr0=tc.lr0, lr_half_every=tc.lr_half_every,
                             episode_length=tc.episode_length, clip_norm=tc.clip_norm,
                             warmup_episodes=tc.warmup_episodes, warmup_steps=tc.warmup_steps,
                             val_every=tc.val_every, val_targets=tc.val_targets,
                             val_steps=tc.val_steps, output_init_scale=tc.output_init_scale,
                             history_np=n_p, history_pad=pad,
                             ablation=self.training.get("ablation", "OVE")),
            "supervised": dict(self.supervised),
            "controllers": dict(pid_cylinder_force=dataclasses.astuple(gains[0]),
                                pid_box_force=dataclasses.astuple(gains[2]),
                                pid_box_torque=dataclasses.astuple(gains[4]),
                                ls_numerator=ls.n, ls_denominator=ls.d),
            "evaluation": dict(self.evaluation),
        }
        lines = []
        for name, values in sections.items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(float(x)) for x in v)
    return str(v)


def build(file_sections: dict[str, dict] | None, flags: dict[str, dict] | None = None,
          environ=None) -> RunConfig:
    """Merge defaults, file sections and flag overrides into a validated RunConfig.

    ``flags`` uses the same ``{section: {key: value}}`` layout as the file.
    """
    file_sections = file_sections or {}
    flags = flags or {}
    environ = os.environ if environ is None else environ
    for sec, values in flags.items():
        schema = _section_schema(sec)
        for k in values:
            if k not in schema:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")

    run = {**file_sections.get("run", {}), **flags.get("run", {})}
    env_id = run.get("env")
    if not env_id:
        raise ConfigError("no environment given (use --env or [run] env)")
    if env_id not in env.ENVIRONMENT_IDS:
        raise ConfigError(f"unknown environment {env_id!r}; valid ids: {', '.join(env.ENVIRONMENT_IDS)}")
    seed = run.get("seed")
    if seed is None:
        raw = environ.get("FLUIDCTL_SEED")
        try:
            seed = int(raw) if raw not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"FLUIDCTL_SEED={raw!r} is not an integer") from None

    def merged(section: str, extra: str | None = None) -> dict:
        out = dict(file_sections.get(section, {}))
        if extra:
            out.update(file_sections.get(extra, {}))
        out.update(flags.get(section, {}))
        return out

    rc = RunConfig(
        env_id=env_id, seed=int(seed), out=run.get("out", "out"),
        environment=merged("environment", f"environment.{env_id}"),
        loss=merged("loss"), training=merged("training"),
        supervised={**SUPERVISED_DEFAULTS, **merged("supervised")},
        controllers=merged("controllers"),
        evaluation={**EVALUATION_DEFAULTS, **merged("evaluation")},
    )
    rc.train_config()  # validates environment, loss and training together
    if rc.evaluation["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    return rc
