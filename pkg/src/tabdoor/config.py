"""Experiment configuration files.

A config is one YAML document. ``extends`` names a shipped preset (or a path)
whose keys are deep-merged underneath the file; a ``null`` value deletes the
inherited key. Strings in ``dataset.synthetic.generator``, ``dataset.schema``,
``pipeline`` and ``attack.template`` are looked up in the shipped preset
libraries (generators.yaml, schemas.yaml, pipelines.yaml, templates.yaml).
Relative CSV paths resolve against the config file's directory, then the
``TABDOOR_DATA_DIR`` environment variable, then the working directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .attack import AttackPattern, AttackTemplate, ComplexityGrid, InjectionSchedule
from .dataset import Schema, ValidityRule, clean_invalid, drop_duplicates, load_csv, split_dataset
from .errors import ConfigError
from .experiment import ExperimentSetup, ModelSpec
from .synth import synthesize_dataset

DATA_DIR_ENV = "TABDOOR_DATA_DIR"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ThreatModel(_Block):
    """Descriptive tags only; nothing reads them besides the manifest."""

    knowledge: str | None = None
    capability: str | None = None
    goal: str | None = None


class SyntheticBlock(_Block):
    generator: str | dict
    n: int = Field(gt=0)
    seed: int = 0


class RuleBlock(_Block):
    feature: str
    op: str
    value: Any = None


class SplitBlock(_Block):
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    stratified: bool = False
    seed: int = 0


class DatasetBlock(_Block):
    csv: str | None = None
    schema_: str | dict | None = Field(default=None, alias="schema")
    synthetic: SyntheticBlock | None = None
    source_hint: str | None = None  # printed when the CSV is missing
    validity_rules: list[RuleBlock] = []
    drop_duplicates: bool = False
    split: SplitBlock = SplitBlock()

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError("set exactly one of 'csv' or 'synthetic'")
        if self.csv is not None and self.schema_ is None:
            raise ValueError("a csv dataset needs a 'schema'")
        return self


class ModelBlock(_Block):
    kind: Literal["gbdt", "mlp"]
    params: dict = {}


class TemplateBlock(_Block):
    name: str = "template"
    pattern: dict
    carrier: dict = {}
    target_value: Any


class AttackBlock(_Block):
    template: str | TemplateBlock
    mode: Literal["unmodified", "modified"] = "unmodified"
    counts: list[int] | None = None
    stop: int | None = None
    step: int | None = None
    numeric_jitter: float = Field(default=0.05, ge=0)
    schedule_seed: int = 0
    repetitions: int = Field(default=10, ge=1)
    aggregation: Literal["median", "best_by_validation"] | None = None
    probes: int = Field(default=20, ge=1)
    rolling_window: int = Field(default=5, ge=1)
    dedup_poisoned_train: bool = False
    inject_after_smote: bool = False
    max_poison_fraction: float | None = 0.25
    success_fraction: float = Field(default=0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _schedule(self):
        if self.counts is None and (self.stop is None or self.step is None):
            raise ValueError("give either 'counts' or both 'stop' and 'step'")
        if self.counts is not None and (self.stop is not None or self.step is not None):
            raise ValueError("'counts' excludes 'stop'/'step'")
        if self.step is not None and self.step < 1:
            raise ValueError("'step' must be >= 1")
        return self


class SweepBlock(_Block):
    tiers: dict[str, dict]


class SearchBlock(_Block):
    candidates: int = Field(default=20, ge=1)
    budget: int = Field(default=10, ge=0)


class ExplainBlock(_Block):
    rows: int = Field(default=20, ge=1)
    permutations: int = Field(default=200, ge=1)
    background: int = Field(default=100, ge=1)


class ExperimentConfig(_Block):
    name: str
    description: str | None = None
    seed: int = 0
    threat_model: ThreatModel = ThreatModel()
    dataset: DatasetBlock
    pipeline: str | list[dict] = []
    model: ModelBlock
    attack: AttackBlock | None = None
    sweep: SweepBlock | None = None
    search: SearchBlock | None = None
    explain: ExplainBlock = ExplainBlock()
    beta: float = Field(default=2.0, gt=0)
    output: str | None = None


# -- loading --------------------------------------------------------------------------------------

def _presets():
    return resources.files("tabdoor") / "presets"


def preset_names():
    libs = {"generators", "schemas", "pipelines", "templates"}
    return sorted(p.name[:-5] for p in _presets().iterdir() if p.name.endswith(".yaml") and p.name[:-5] not in libs)


def _library(name):
    return yaml.safe_load((_presets() / f"{name}.yaml").read_text(encoding="utf-8"))


def _read_yaml(path):
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def deep_merge(base, over, _path=()):
    """``over`` on top of ``base``; nested mappings merge, ``None`` deletes.

    Two mappings are replaced rather than merged: ``sweep.tiers`` and a
    ``model`` block whose ``kind`` differs from the inherited one.
    """
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = _path + (k,)
        if v is None:
            out.pop(k, None)
        elif isinstance(v, dict) and isinstance(out.get(k), dict) and not _replaces(path, out[k], v):
            out[k] = deep_merge(out[k], v, path)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _replaces(path, old, new):
    if path == ("sweep", "tiers"):
        return True
    return path == ("model",) and new.get("kind", old.get("kind")) != old.get("kind")


def _resolve_extends(data, base_dir, seen=()):
    parent = data.pop("extends", None)
    if parent is None:
        return data, base_dir
    candidate = Path(base_dir) / parent
    if candidate.is_file():
        path, parent_dir = candidate, candidate.parent
    else:
        path = _presets() / f"{parent}.yaml"
        parent_dir = base_dir
        if not path.is_file():
            raise ConfigError(f"extends: unknown preset {parent!r}; shipped presets are {preset_names()}")
    key = str(path)
    if key in seen:
        raise ConfigError(f"extends: cycle through {parent!r}")
    parent_data, parent_dir = _resolve_extends(_read_yaml(path), parent_dir, seen + (key,))
    return deep_merge(parent_data, data), parent_dir


def _lookup(kind, value):
    if not isinstance(value, str):
        return value
    lib = _library(kind)
    if value not in lib:
        raise ConfigError(f"unknown {kind[:-1]} preset {value!r}; available: {sorted(lib)}")
    return lib[value]


def _format_errors(exc: PydanticError):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]).replace("schema_", "schema")
        if err["type"] == "extra_forbidden":
            lines.append(f"{loc}: unknown key")
        else:
            lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data, base_dir="."):
    """Validate a raw mapping (after ``extends``) into an :class:`ExperimentConfig`."""
    data, base_dir = _resolve_extends(dict(data), base_dir)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except PydanticError as exc:
        raise ConfigError(_format_errors(exc)) from None
    # library references are expanded so the resolved config is self-contained
    ds = cfg.dataset
    if ds.synthetic is not None:
        ds.synthetic.generator = _lookup("generators", ds.synthetic.generator)
    if ds.schema_ is not None:
        ds.schema_ = _lookup("schemas", ds.schema_)
    if isinstance(cfg.pipeline, str):
        cfg.pipeline = _lookup("pipelines", cfg.pipeline)
    if cfg.attack is not None and isinstance(cfg.attack.template, str):
        try:
            cfg.attack.template = TemplateBlock(name=cfg.attack.template, **_lookup("templates", cfg.attack.template))
        except PydanticError as exc:
            raise ConfigError(_format_errors(exc)) from None
    if ds.csv is not None:
        ds.csv = str(_resolve_csv(ds.csv, base_dir))
    _check_model(cfg)
    return cfg


def _check_model(cfg):
    # model parameters are validated by the trainers themselves; prefix their
    # messages with the config path so the failing key is obvious
    try:
        ModelSpec(cfg.model.kind, dict(cfg.model.params))
    except ConfigError as exc:
        raise ConfigError(f"model.params: {exc}") from None
    if cfg.sweep is not None:
        try:
            ComplexityGrid(dict(cfg.sweep.tiers)).validate(cfg.model.kind)
        except ConfigError as exc:
            raise ConfigError(f"sweep.tiers: {exc}") from None
        for name, over in cfg.sweep.tiers.items():
            try:
                ModelSpec(cfg.model.kind, {**cfg.model.params, **over})
            except ConfigError as exc:
                raise ConfigError(f"sweep.tiers.{name}: {exc}") from None


def _resolve_csv(csv, base_dir):
    p = Path(csv).expanduser()
    if p.is_absolute():
        return p
    for root in (Path(base_dir), Path(os.environ.get(DATA_DIR_ENV, ".")), Path.cwd()):
        if (root / p).is_file():
            return (root / p).resolve()
    return (Path(os.environ.get(DATA_DIR_ENV, ".")) / p).resolve()


def load_config(path):
    path = Path(path)
    if not path.is_file():
        shipped = _presets() / f"{path.name}.yaml" if path.suffix == "" else None
        if shipped is not None and shipped.is_file():
            path = Path(str(shipped))
        else:
            raise ConfigError(f"config file not found: {path} (shipped presets: {preset_names()})")
    return parse_config(_read_yaml(path), path.parent)


def config_to_dict(cfg: ExperimentConfig):
    return cfg.model_dump(mode="json", by_alias=True, exclude_none=True)


def config_hash(cfg: ExperimentConfig):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# -- building runtime objects ------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.synthetic is not None:
        return synthesize_dataset(ds.synthetic.generator, ds.synthetic.n, ds.synthetic.seed)
    schema = Schema.from_dict(ds.schema_)
    if not Path(ds.csv).is_file():
        hint = f" {ds.source_hint}" if ds.source_hint else ""
        raise ConfigError(
            f"dataset.csv: file not found at {ds.csv}.{hint} Put the file there, point dataset.csv at it, "
            f"or set {DATA_DIR_ENV} to its directory. The '-synthetic' presets need no download."
        )
    return load_csv(ds.csv, schema)


def prepare_splits(cfg: ExperimentConfig):
    """Load or synthesize, drop invalid rows and (optionally) duplicates, then split."""
    data = load_dataset(cfg)
    rules = [ValidityRule(r.feature, r.op, r.value) for r in cfg.dataset.validity_rules]
    data, _ = clean_invalid(data, rules)
    if cfg.dataset.drop_duplicates:
        data = drop_duplicates(data)
    sp = cfg.dataset.split
    return split_dataset(data, sp.ratios, sp.stratified, sp.seed)


def build_setup(cfg: ExperimentConfig, splits=None, model_overrides=None):
    if splits is None:
        splits = prepare_splits(cfg)
    params = {**cfg.model.params, **(model_overrides or {})}
    dedup = cfg.attack.dedup_poisoned_train if cfg.attack else False
    after = cfg.attack.inject_after_smote if cfg.attack else False
    return ExperimentSetup(splits, list(cfg.pipeline), ModelSpec(cfg.model.kind, params), dedup, after, cfg.beta)


def build_template(cfg: ExperimentConfig):
    if cfg.attack is None:
        raise ConfigError("attack: this command needs an 'attack' block")
    t = cfg.attack.template
    return AttackTemplate.from_dict(t.model_dump())


def build_pattern(cfg: ExperimentConfig):
    tpl = build_template(cfg)
    return AttackPattern(dict(tpl.pattern.fixed_features), tpl.pattern.target_value)


def build_schedule(cfg: ExperimentConfig):
    a = cfg.attack
    if a is None:
        raise ConfigError("attack: this command needs an 'attack' block")
    if a.counts is not None:
        return InjectionSchedule(a.mode, tuple(a.counts), a.numeric_jitter, a.schedule_seed)
    return InjectionSchedule.stepped(a.mode, a.stop, a.step, numeric_jitter=a.numeric_jitter, seed=a.schedule_seed)


def build_grid(cfg: ExperimentConfig):
    if cfg.sweep is None:
        raise ConfigError("sweep: this command needs a 'sweep' block")
    grid = ComplexityGrid(dict(cfg.sweep.tiers))
    grid.validate(cfg.model.kind)
    return grid
