"""Experiment configuration files: TOML schema, validation, loading.

A config is a small TOML document with [run], [backbone], [train],
[adapter], and [data] sections. Unknown sections or fields are errors
(they are almost always typos), missing optional fields take documented
defaults, and every complaint names the offending field as
"section.field" so it can be found in the file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backbone import BackboneConfig
from .errors import ConfigError, require
from .trainer import TrainConfig

_REQUIRED = object()

# section -> field -> (type, default or _REQUIRED)
SCHEMA = {
    "run": {
        "seed": (int, _REQUIRED),
        "out_dir": (str, "runs"),
    },
    "backbone": {
        "d_model": (int, _REQUIRED),
        "n_layers": (int, 4),
        "n_heads": (int, 4),
        "vocab": (int, 64),
        "context": (int, 32),
        "ffn_mult": (int, 4),
    },
    "train": {
        "lr": (float, 3e-4),
        "epochs": (int, 10),
        "batch_size": (int, 32),
        "balance_weight": (float, 0.01),
        "optimizer": (str, "adam"),
    },
    "adapter": {
        "rank": (int, 8),
        "alpha": (float, 16.0),
        "drop_p": (float, 0.1),
        "allocation": (str, "ascending"),
        "top_k": (int, 2),
    },
    "data": {
        "n_train": (int, 1000),
        "n_test": (int, 500),
        "pretrain_slice": (int, 200),
    },
}


@dataclass(frozen=True)
class RunSpec:
    """A validated config: seed, output root, and the train settings."""

    seed: int
    out_dir: str
    train: TrainConfig
    text: str
    path: str

    @property
    def content_hash(self) -> str:
        return config_hash(self.text)


def config_hash(text: str) -> str:
    """Content hash of the raw config text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(section: str, field: str, want_type, value):
    dotted = f"{section}.{field}"
    if want_type is float and isinstance(value, int) \
            and not isinstance(value, bool):
        return float(value)
    # bool subclasses int in Python; no field here wants a bool
    if not isinstance(value, want_type) or isinstance(value, bool):
        require(False, ConfigError,
                f"field `{dotted}` must be {want_type.__name__}, "
                f"got {type(value).__name__}")
    return value


def validate_document(doc: dict) -> dict[str, dict]:
    """Check a parsed TOML document against the schema.

    Returns {section: {field: value}} with defaults filled in.
    """
    require(isinstance(doc, dict), ConfigError,
            "config root must be a table")
    for section in doc:
        require(section in SCHEMA, ConfigError,
                f"unknown section `{section}`; "
                f"valid sections: {', '.join(SCHEMA)}")
        require(isinstance(doc[section], dict), ConfigError,
                f"`{section}` must be a table of fields")
        for field in doc[section]:
            require(field in SCHEMA[section], ConfigError,
                    f"unknown field `{section}.{field}`")
    out: dict[str, dict] = {}
    for section, fields in SCHEMA.items():
        got = doc.get(section, {})
        out[section] = {}
        for field, (want_type, default) in fields.items():
            if field in got:
                out[section][field] = _coerce(section, field, want_type,
                                              got[field])
            else:
                require(default is not _REQUIRED, ConfigError,
                        f"missing required field `{section}.{field}`")
                out[section][field] = default
    return out


def spec_from_values(values: dict[str, dict], text: str,
                     path: str) -> RunSpec:
    backbone = BackboneConfig(**values["backbone"])
    train = TrainConfig(backbone=backbone, seed=values["run"]["seed"],
                        **values["train"], **values["adapter"],
                        **values["data"])
    return RunSpec(seed=values["run"]["seed"],
                   out_dir=values["run"]["out_dir"],
                   train=train, text=text, path=path)


def load_config(path: str | Path) -> RunSpec:
    path = Path(path)
    require(path.is_file(), ConfigError, f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e
    values = validate_document(doc)
    return spec_from_values(values, text, str(path))
