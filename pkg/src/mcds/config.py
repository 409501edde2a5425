"""Run configuration: one JSON document with a section per pipeline stage.

Unknown keys are errors at every level. ``--set section.key=value``
overrides are applied to the raw document before validation, so they get
the same checks as file contents.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from .cmcn import CMCNConfig
from .encoder import EncoderConfig
from .env import EnvSpec
from .errors import ValidationError
from .analysis.mine import MINEConfig
from .mhfp import MHFPConfig
from .policy import PolicyConfig
from .trainer import ModelConfig, TrainConfig

DEFAULT_OUT = "runs"


@dataclass
class EnvSection:
    arena_size: float = 1.0
    n_objects: int = 3
    family: str = "mixed"
    max_steps: int = 200
    noise: float = 0.1
    obs_noise: float = 0.005
    max_step: float = 0.05
    goal_radius: float = 0.08
    grasp_radius: float = 0.04
    n_demos: int = 200

    def spec(self) -> EnvSpec:
        d = asdict(self)
        d.pop("n_demos")
        return EnvSpec(**d)


@dataclass
class PolicySection:
    depth: int = 3
    width: int = 128
    obs_window: int = 2
    chunk: int = 4
    task_embed_dim: int = 16
    concept_layer: int = 1
    lambda_mc: float = 0.1
    iterations: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 1e-3
    eval_episodes: int = 50
    sweep_lambdas: list = field(default_factory=lambda: [0.0, 0.001, 0.01, 0.1, 1.0])
    sweep_layers: list = field(default_factory=lambda: [0, 1, 2])
    sweep_seeds: list = field(default_factory=lambda: [0])

    def model(self) -> PolicyConfig:
        return PolicyConfig(**{f.name: getattr(self, f.name) for f in fields(PolicyConfig)})

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, lr=self.lr, warmup=self.warmup,
                           weight_decay=self.weight_decay, seed=seed)


@dataclass
class AnalysisSection:
    which: list = field(default_factory=lambda: ["similarity", "hierarchy", "diversity", "gallery", "cmi"])
    hierarchy_eps: list = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(11)])
    diversity_eps: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0])
    diversity_samples: int = 2000
    gallery_eps: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3])
    gallery_demo: int = 0
    cmi_samples: int = 3000
    # modality pairs are high-dimensional, so minibatches and a single init per restart keep this affordable
    mine: MINEConfig = field(default_factory=lambda: MINEConfig(iterations=3000, batch_size=512, candidates=1))


@dataclass
class IOSection:
    out_dir: str = ""
    dataset: str = ""
    concepts: str = ""
    labels: str = ""
    policy: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cmcn: CMCNConfig = field(default_factory=CMCNConfig)
    mhfp: MHFPConfig = field(default_factory=MHFPConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    io: IOSection = field(default_factory=IOSection)

    def model(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.cmcn, self.mhfp)

    def to_dict(self) -> dict:
        return asdict(self)

    # resolved artifact paths; explicit io.* entries win over the defaults under out_dir
    def out(self) -> Path:
        return Path(self.io.out_dir)

    def path(self, what: str) -> Path:
        explicit = getattr(self.io, what)
        if explicit:
            return Path(explicit)
        default = {"dataset": "data/dataset.mcds", "concepts": "concepts/checkpoint.mcck",
                   "labels": "labels/labels.mccl", "policy": "policy/checkpoint.mcck"}[what]
        return self.out() / default


def _build(base, data: Any, where: str):
    """Return a copy of dataclass instance ``base`` with the keys of ``data`` applied."""
    if not isinstance(data, dict):
        raise ValidationError(f"{where or 'config'} must be an object")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(f'{where}.{k}'.lstrip('.') for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        path = f"{where}.{name}".lstrip(".")
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(default, value, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    return dataclasses.replace(base, **kwargs)


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{path} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ValidationError(f"{path} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ValidationError(f"{path} must be a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ValidationError(f"{path} must be a list")
    return value


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    for text in overrides:
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return doc


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {path} is not valid JSON: {e}") from None
    doc = apply_overrides(doc, overrides)
    cfg = _build(RunConfig(), doc, "")
    if not cfg.io.out_dir:
        cfg.io.out_dir = os.environ.get("MCDS_OUT_DIR", DEFAULT_OUT)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    cfg.env.spec().validate()
    if cfg.env.n_demos < 1:
        raise ValidationError("env.n_demos must be >= 1")
    cfg.encoder.validate()
    cfg.cmcn.validate()
    cfg.mhfp.validate()
    cfg.train.validate()
    cfg.policy.model().validate()
    if cfg.analysis.mine.restarts < 1 or cfg.analysis.mine.candidates < 1:
        raise ValidationError("analysis.mine.restarts and candidates must be >= 1")
