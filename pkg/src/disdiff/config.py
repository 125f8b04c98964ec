"""JSON run configuration: attack hyper-parameters plus prompt, backend and paths."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from disdiff.attack import AttackConfig
from disdiff.backend.base import PromptSpec
from disdiff.errors import ConfigurationError, DisDiffError

# JSON keys that differ from the attribute name
KEY_ALIASES = {"lambda": "lam"}
PATH_KEYS = ("input_dir", "clean_dir", "class_dir", "backend_weights")
BACKENDS = ("toy", "adapter")


@dataclass
class RunConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    prompt: str = "a photo of sks person"
    subject_token: str = "sks"
    class_token: str = "person"
    class_prompt: str = "a photo of person"
    backend: str = "toy"
    adapter: str | None = None
    backend_weights: Path | None = None
    input_dir: Path | None = None
    clean_dir: Path | None = None
    class_dir: Path | None = None
    output_dir: Path | None = None
    hqs_term: str = "diffusion"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "adapter" and not self.adapter:
            raise ConfigurationError("backend 'adapter' needs an 'adapter' entry of the form 'module:factory'")
        if self.hqs_term not in ("diffusion", "cae", "combined"):
            raise ConfigurationError(f"unknown hqs_term {self.hqs_term!r}")
        # validates the prompt early
        self.prompt_spec()

    def prompt_spec(self) -> PromptSpec:
        try:
            return PromptSpec.from_text(self.prompt, self.subject_token, self.class_token)
        except DisDiffError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_dict(self) -> dict:
        """JSON-ready echo that :func:`from_dict` accepts unchanged."""
        doc = {}
        for f in dataclasses.fields(AttackConfig):
            key = next((k for k, v in KEY_ALIASES.items() if v == f.name), f.name)
            doc[key] = getattr(self.attack, f.name)
        for f in dataclasses.fields(self):
            if f.name == "attack":
                continue
            v = getattr(self, f.name)
            doc[f.name] = str(v) if isinstance(v, Path) else v
        return doc

    def replace(self, **changes) -> "RunConfig":
        attack_changes = {k: changes.pop(k) for k in list(changes) if k in _attack_fields()}
        attack = dataclasses.replace(self.attack, **attack_changes) if attack_changes else self.attack
        return dataclasses.replace(self, attack=attack, **changes)


def _attack_fields() -> set[str]:
    return {f.name for f in dataclasses.fields(AttackConfig)}


def _run_fields() -> set[str]:
    return {f.name for f in dataclasses.fields(RunConfig)} - {"attack"}


def from_dict(doc: dict, base_dir=None) -> RunConfig:
    """Build a RunConfig; unknown keys and missing input paths are errors.

    Relative paths are taken relative to ``base_dir`` (the config file's
    directory when loading from disk).
    """
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    attack_kw, run_kw = {}, {}
    unknown = []
    for key, value in doc.items():
        name = KEY_ALIASES.get(key, key)
        if name in _attack_fields() and key not in ("lam",):
            attack_kw[name] = value
        elif name in _run_fields():
            run_kw[name] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")

    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for key in (*PATH_KEYS, "output_dir"):
        if run_kw.get(key) is not None:
            p = Path(run_kw[key])
            run_kw[key] = p if p.is_absolute() else base / p
    for key in PATH_KEYS:
        if run_kw.get(key) is not None and not run_kw[key].exists():
            raise ConfigurationError(f"{key} does not exist: {run_kw[key]}")
    try:
        attack = AttackConfig(**attack_kw)
        return RunConfig(attack=attack, **run_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(doc, base_dir=p.parent)
