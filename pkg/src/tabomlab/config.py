"""Experiment configuration: INI sections with dotted ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .objectives import OBJECTIVES
from .tasks import builtin_tasks

DEFAULTS = """\
[experiment]
name = toy
out_dir = runs/toy
seeds = 0,1,2

[model]
layers = 2
heads = 4
model_dim = 64
ffn_dim = 128
max_prompt_len = 8
max_response_len = 8
init_std = 0.02

[tasks]
in_domain = sort,reverse
ood = copy,mod
pretrain_per_task = 800
finetune_per_task = 1000
eval_samples = 300
eval_seed = 999
tds_prompts = 64
tds_samples = 64

[pretrain]
lr = 0.002
warmup = 50
epochs = 8
batch_size = 32

[finetune]
objectives = sft-gt,sft-sd,traj-mask,tabom
lr = 0.0005
warmup = 20
epochs = 5
batch_size = 32

[tabom]
window = 4
margin = 0.2
weight = 1.0
context_mode = exact
window_mode = local

[decode]
per_step = 1
temperature = 0.0
top_p = 1.0

[ce]
ratios = 0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9

[ablate]
windows = 2,4,6
weights = 0.5,1.0
margins = 0.1,0.2
"""


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` is the dotted field name."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"config field {key}: {reason}")
        self.key = key


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _names(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


@dataclass
class ExperimentConfig:
    text: str
    name: str
    out_dir: str
    seeds: list[int]
    model: dict
    in_domain: list[str]
    ood: list[str]
    tasks: dict
    pretrain: dict
    finetune: dict
    objectives: list[str]
    tabom: dict
    decode: dict
    ratios: list[float]
    ablate: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    @property
    def all_tasks(self) -> list[str]:
        return self.in_domain + self.ood


def _parser(text: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(DEFAULTS)
    if text:
        user = configparser.ConfigParser(interpolation=None)
        user.read_string(text)
        for sec in user.sections():
            if not cp.has_section(sec):
                raise ConfigError(sec, "unknown section")
            for key, val in user[sec].items():
                if key not in cp[sec]:
                    raise ConfigError(f"{sec}.{key}", "unknown key")
                cp[sec][key] = val
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides: Sequence[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, val = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(dotted, "override key must be section.key")
        sec, key = dotted.strip().split(".", 1)
        if not cp.has_section(sec) or key not in cp[sec]:
            raise ConfigError(dotted, "unknown key")
        cp[sec][key] = val.strip()


def _get(cp, sec: str, key: str, conv):
    raw = cp[sec][key]
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{sec}.{key}", f"cannot parse {raw!r}") from None


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    text = Path(path).read_text() if path else None
    cp = _parser(text)
    apply_overrides(cp, overrides)
    buf = io.StringIO()
    cp.write(buf)
    cfg = ExperimentConfig(
        text=buf.getvalue(),
        name=cp["experiment"]["name"],
        out_dir=cp["experiment"]["out_dir"],
        seeds=_get(cp, "experiment", "seeds", _ints),
        model={k: _get(cp, "model", k, float if k == "init_std" else int) for k in cp["model"]},
        in_domain=_names(cp["tasks"]["in_domain"]),
        ood=_names(cp["tasks"]["ood"]),
        tasks={k: _get(cp, "tasks", k, int) for k in cp["tasks"] if k not in ("in_domain", "ood")},
        pretrain={k: _get(cp, "pretrain", k, float if k == "lr" else int) for k in cp["pretrain"]},
        finetune={k: _get(cp, "finetune", k, float if k == "lr" else int)
                  for k in cp["finetune"] if k != "objectives"},
        objectives=_names(cp["finetune"]["objectives"]),
        tabom={
            "window": _get(cp, "tabom", "window", int),
            "margin": _get(cp, "tabom", "margin", float),
            "weight": _get(cp, "tabom", "weight", float),
            "context_mode": cp["tabom"]["context_mode"].strip(),
            "window_mode": cp["tabom"]["window_mode"].strip(),
        },
        decode={
            "per_step": _get(cp, "decode", "per_step", int),
            "temperature": _get(cp, "decode", "temperature", float),
            "top_p": _get(cp, "decode", "top_p", float),
        },
        ratios=_get(cp, "ce", "ratios", _floats),
        ablate={
            "windows": _get(cp, "ablate", "windows", _ints),
            "weights": _get(cp, "ablate", "weights", _floats),
            "margins": _get(cp, "ablate", "margins", _floats),
        },
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    known = builtin_tasks()
    for key, ids in (("tasks.in_domain", cfg.in_domain), ("tasks.ood", cfg.ood)):
        for tid in ids:
            if tid not in known:
                raise ConfigError(key, f"unknown task {tid!r}; choose from {', '.join(sorted(known))}")
    if not cfg.in_domain:
        raise ConfigError("tasks.in_domain", "at least one in-domain task is required")
    if set(cfg.in_domain) & set(cfg.ood):
        raise ConfigError("tasks.ood", "overlaps the in-domain split")
    if not cfg.seeds:
        raise ConfigError("experiment.seeds", "at least one seed is required")
    for obj in cfg.objectives:
        if obj not in OBJECTIVES:
            raise ConfigError("finetune.objectives", f"unknown objective {obj!r}")
    t = cfg.tabom
    if t["weight"] > 0 and t["window"] < 2:
        raise ConfigError("tabom.window", "must be >= 2 when tabom.weight > 0")
    if t["margin"] <= 0:
        raise ConfigError("tabom.margin", "must be > 0")
    if t["context_mode"] not in ("exact", "shared"):
        raise ConfigError("tabom.context_mode", "must be exact or shared")
    if t["window_mode"] not in ("local", "global"):
        raise ConfigError("tabom.window_mode", "must be local or global")
    if cfg.decode["per_step"] < 1:
        raise ConfigError("decode.per_step", "must be >= 1")
    for r in cfg.ratios:
        if not 0 < r < 1:
            raise ConfigError("ce.ratios", f"ratio {r} outside (0, 1)")
    for w in cfg.ablate["windows"]:
        if w < 2:
            raise ConfigError("ablate.windows", "every window must be >= 2")
    for sec in ("pretrain", "finetune"):
        for key in ("epochs", "batch_size"):
            if getattr(cfg, sec)[key] < 1:
                raise ConfigError(f"{sec}.{key}", "must be >= 1")
