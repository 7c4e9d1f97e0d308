"""Strict JSON run configuration mirroring every component's settings.

Unknown keys are rejected at every level so typos cannot silently fall
back to defaults; every command logs the fully resolved document, and
its hash identifies the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .data import SynthConfig
from .downstream import FinetuneConfig
from .errors import ConfigError
from .masking import STRATEGIES
from .tokenizer import TokenizerConfig
from .training import PretrainConfig


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


def _section_defaults(instance) -> dict:
    return {k: _jsonable(v) for k, v in asdict(instance).items()}


def default_document() -> dict:
    return {
        "seed": 0,
        "data": _section_defaults(SynthConfig()),
        "tokenizer": _section_defaults(TokenizerConfig()),
        "backbone": _section_defaults(BackboneConfig()),
        "pretrain": _section_defaults(PretrainConfig()),
        "finetune": _section_defaults(FinetuneConfig()),
    }


def _merge(defaults: dict, user: dict, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in '{path or 'top level'}'")
    merged = dict(defaults)
    for key, value in user.items():
        if isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, f"{path}.{key}" if path else key)
        else:
            merged[key] = _jsonable(value)
    return merged


def _tupled(doc: dict, *keys):
    for key in keys:
        if isinstance(doc.get(key), list):
            doc[key] = tuple(tuple(v) if isinstance(v, list) else v for v in doc[key])


@dataclass
class RunConfig:
    seed: int
    data: SynthConfig
    tokenizer: TokenizerConfig
    backbone: BackboneConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    document: dict  # the resolved JSON form, logged verbatim

    @classmethod
    def from_document(cls, user: dict | None = None) -> "RunConfig":
        user = user or {}
        doc = _merge(default_document(), user, "")
        seed = doc["seed"]
        # section seeds follow the top-level seed unless set explicitly
        if "pretrain" not in user or "seed" not in user.get("pretrain", {}):
            doc["pretrain"]["seed"] = seed
        if "finetune" not in user or "seed" not in user.get("finetune", {}):
            doc["finetune"]["seed"] = seed

        data_kw = dict(doc["data"])
        _tupled(data_kw, "motion_speed_range", "shape_palette")
        tok_kw = dict(doc["tokenizer"])
        _tupled(tok_kw, "tubelet")
        pre_kw = dict(doc["pretrain"])
        _tupled(pre_kw, "betas")
        ft_kw = dict(doc["finetune"])
        _tupled(ft_kw, "betas")
        return cls(
            seed=seed,
            data=SynthConfig(**data_kw),
            tokenizer=TokenizerConfig(**tok_kw),
            backbone=BackboneConfig(**doc["backbone"]),
            pretrain=PretrainConfig(**pre_kw),
            finetune=FinetuneConfig(**ft_kw),
            document=doc,
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_document(user)

    def dumps(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        raw = json.dumps(self.document, sort_keys=True).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:12]

    def with_overrides(self, **sections) -> "RunConfig":
        """New config with section-level key overrides, e.g.
        with_overrides(pretrain={"strategy": "tube"})."""
        doc = json.loads(json.dumps(self.document))
        for section, values in sections.items():
            if section == "seed":
                doc["seed"] = values
                continue
            doc[section].update(values)
        return RunConfig.from_document(doc)
