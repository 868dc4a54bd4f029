"""One JSON document configuring a whole run, with strict key checking."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .datagen import CorpusConfig, WindowConfig
from .embedhead import HeadConfig
from .inference import MergeConfig
from .model import ModelConfig
from .trainer import StageConfig


class ConfigKeyError(ValueError):
    pass


MODEL_KEYS = ("tau", "learnable_tau", "max_gen_steps", "context_frames")
EVAL_DEFAULTS = {"k": 25, "loc_limit": None, "batch_size": 64}
SECTIONS = ("seed", "out", "corpus", "backbone", "head", "model", "stages", "window", "merge", "eval")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check(section: str, given: dict, allowed: set[str]) -> None:
    if not isinstance(given, dict):
        raise ConfigKeyError(f"{section} must be an object")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigKeyError(f"unknown key(s) in {section}: {unknown}")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    stages: list = field(default_factory=lambda: [{"stage": 1}, {"stage": 2}, {"stage": 3}])
    window: dict = field(default_factory=dict)
    merge: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        _check("corpus", self.corpus, _fields(CorpusConfig))
        _check("backbone", self.backbone, _fields(BackboneConfig))
        _check("head", self.head, _fields(HeadConfig))
        _check("model", self.model, set(MODEL_KEYS))
        _check("window", self.window, _fields(WindowConfig))
        _check("merge", self.merge, _fields(MergeConfig))
        _check("eval", self.eval, set(EVAL_DEFAULTS))
        if not isinstance(self.stages, list) or not self.stages:
            raise ConfigKeyError("stages must be a nonempty list")
        for s in self.stages:
            _check("stages[]", s, _fields(StageConfig))
            if "stage" not in s:
                raise ConfigKeyError("every stage entry needs a 'stage' number")
        # constructing each config surfaces value errors early
        self.corpus_config()
        self.model_config()
        self.stage_configs()
        self.window_config()
        self.merge_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check("config", d, set(SECTIONS))
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path | None, env: dict | None = None) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        return cls.from_dict(d).with_env(env)

    def with_env(self, env: dict | None = None) -> "RunConfig":
        env = os.environ if env is None else env
        d = self.to_dict()
        if env.get("VILLE_SEED"):
            d["seed"] = int(env["VILLE_SEED"])
        if env.get("VILLE_OUT"):
            d["out"] = env["VILLE_OUT"]
        return RunConfig.from_dict(d)

    def override(self, **sections) -> "RunConfig":
        """Shallow-merge section dicts (or replace scalars/lists)."""
        d = self.to_dict()
        for k, v in sections.items():
            if v is None:
                continue
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return RunConfig.from_dict(d)

    # -- typed views -----------------------------------------------------------

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(**self.corpus)

    def model_config(self) -> ModelConfig:
        return ModelConfig(backbone=BackboneConfig(**self.backbone), head=HeadConfig(**self.head), **self.model)

    def stage_configs(self) -> list[StageConfig]:
        return [StageConfig.default(s["stage"], **{k: v for k, v in s.items() if k != "stage"}) for s in self.stages]

    def window_config(self) -> WindowConfig:
        return WindowConfig(**self.window)

    def merge_config(self) -> MergeConfig:
        return MergeConfig(**self.merge)

    def eval_options(self) -> dict:
        return {**EVAL_DEFAULTS, **self.eval}

    def to_dict(self) -> dict:
        return copy.deepcopy(dataclasses.asdict(self))

    def effective(self) -> dict:
        """Every field with defaults filled in; re-loadable as a RunConfig."""
        mc = self.model_config().to_dict()
        stages = []
        for sc in self.stage_configs():
            row = dataclasses.asdict(sc)
            row["tasks"] = list(row["tasks"])
            stages.append(row)
        corpus = dataclasses.asdict(self.corpus_config())
        for k in ("event_range", "event_len_range", "duration_range"):
            corpus[k] = list(corpus[k])
        return {
            "seed": self.seed,
            "out": self.out,
            "corpus": corpus,
            "backbone": mc["backbone"],
            "head": mc["head"],
            "model": {k: mc[k] for k in MODEL_KEYS},
            "stages": stages,
            "window": dataclasses.asdict(self.window_config()),
            "merge": dataclasses.asdict(self.merge_config()),
            "eval": self.eval_options(),
        }


# -- named profiles ------------------------------------------------------------------

# Fast CPU profile used by the acceptance suite: a 2-layer backbone, every third
# frame, stage 1 then stage 3.
FAST_PROFILE: dict[str, Any] = {
    "corpus": {"n_videos": 1000, "n_test": 200, "frame_stride": 3},
    "backbone": {"n_layers": 2},
    "stages": [
        {"stage": 1, "steps": 1000, "warmup_steps": 50, "phase_jitter": True, "crop_prob": 0.4},
        {"stage": 3, "steps": 400, "warmup_steps": 30, "batch_size": 16, "match_perturbed": 2,
         "loss_weights": {"match": 5.0, "ret": 2.0}},
    ],
}

PROFILES = {"default": {}, "fast": FAST_PROFILE}


def profile(name: str, **overrides) -> RunConfig:
    if name not in PROFILES:
        raise ConfigKeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return RunConfig.from_dict(copy.deepcopy(PROFILES[name])).override(**overrides)


def with_tasks(cfg: RunConfig, per_stage: dict[int, list[str]]) -> RunConfig:
    """Copy of ``cfg`` with stage task lists replaced (supervision ablations)."""
    stages = [dict(s, tasks=list(per_stage[s["stage"]])) if s["stage"] in per_stage else dict(s) for s in cfg.stages]
    return cfg.override(stages=stages)


GEN_ONLY = {1: ["cap"], 2: ["cap"], 3: ["cap", "qa", "match"]}
CONTRASTIVE_ONLY = {1: ["ret"], 2: ["ret"], 3: ["ret", "loc", "compose"]}
