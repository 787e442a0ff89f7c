"""Experiment configuration: file parsing, defaults, and hashing.

The on-disk format is INI-style sections of ``key = value`` lines (see
README for the full schema). Parsing resolves every default, so two
files that resolve to the same settings hash identically, and the hash
stamps every artifact a run produces.

Defaults describe the desk-scale experiment used by the acceptance
suite: synthetic 10-class Gaussian data, 10 clients, 1 attacker, 30
rounds.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import BackdoorSpec
from .errors import (
    ConfigFileError,
    ConfigSyntaxError,
    ConfigurationError,
    DomainError,
    InvariantError,
    UnknownKeyError,
)
from .federation import LocalTrainConfig
from .unlearning import DistillConfig

DERIVED = object()  # default sentinel: value derives from master_seed


def _int(raw: str) -> int:
    return int(raw)


def _float(raw: str) -> float:
    return float(raw)


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _str(raw: str) -> str:
    return raw.strip()


def _int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _float_list(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(float(part) for part in raw.split(","))


def _str_list(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(part.strip() for part in raw.split(","))


# section -> key -> (converter, default)
SCHEMA = {
    "data": {
        "kind": (_str, "synthetic"),
        "num_classes": (_int, 10),
        "feature_dim": (_int, 32),
        "per_class": (_int, 300),
        "spread": (_float, 1.2),
        "seed": (_int, DERIVED),
        "n_clients": (_int, 10),
        "idx_images": (_str, ""),
        "idx_labels": (_str, ""),
    },
    "attack": {
        "attacker": (_int, 0),
        "trigger_indices": (_int_list, (0, 1, 2, 3, 4, 5)),
        "trigger_values": (_float_list, (6.0, 6.0, 6.0, 6.0, 6.0, 6.0)),
        "source_class": (_int, 1),
        "target_class": (_int, 9),
        "poison_fraction": (_float, 1.0),
    },
    "training": {
        "rounds": (_int, 30),
        "local_epochs": (_int, 2),
        "batch_size": (_int, 20),
        "learning_rate": (_float, 0.3),
        "hidden_layers": (_int_list, (16,)),
        "shuffle_seed_base": (_int, DERIVED),
    },
    "unlearn": {
        "mode": (_str, "lazy"),
        "epochs": (_int, 5),
        "temperature": (_float, 3.0),
        "learning_rate": (_float, 0.02),
        "batch_size": (_int, 32),
        "hard_label_weight": (_float, 0.0),
        "shuffle_seed": (_int, DERIVED),
        "post_rounds": (_int, 10),
    },
    "output": {
        "directory": (_str, "runs/latest"),
        "formats": (_str_list, ("csv", "json")),
        "resume": (_bool, False),
    },
    "run": {
        "master_seed": (_int, 1),
    },
}

VALID_FORMATS = ("csv", "json", "svg")
VALID_MODES = ("lazy", "rescaled")
VALID_KINDS = ("synthetic", "idx")


@dataclass(frozen=True)
class DataSection:
    kind: str
    num_classes: int
    feature_dim: int
    per_class: int
    spread: float
    seed: int
    n_clients: int
    idx_images: str
    idx_labels: str


@dataclass(frozen=True)
class AttackSection:
    attacker: int
    spec: BackdoorSpec


@dataclass(frozen=True)
class TrainingSection:
    rounds: int
    hidden_layers: tuple[int, ...]
    local: LocalTrainConfig


@dataclass(frozen=True)
class UnlearnSection:
    mode: str
    distill: DistillConfig
    post_rounds: int


@dataclass(frozen=True)
class OutputSection:
    directory: str
    formats: tuple[str, ...]
    resume: bool


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection
    attack: AttackSection
    training: TrainingSection
    unlearn: UnlearnSection
    output: OutputSection
    master_seed: int
    config_hash: str
    flat: tuple[tuple[str, str], ...]  # resolved (section.key, value) pairs

    def flat_dict(self) -> dict[str, str]:
        return dict(self.flat)


def _canonical(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    return str(value)


def _resolve(raw: dict[str, dict[str, str]], seed_override: Optional[int] = None) -> ExperimentConfig:
    for section, keys in raw.items():
        if section not in SCHEMA:
            raise UnknownKeyError(f"unknown config section [{section}]")
        for key in keys:
            if key not in SCHEMA[section]:
                raise UnknownKeyError(f"unknown config key {section}.{key}")

    values: dict[str, dict[str, object]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (convert, default) in keys.items():
            raw_value = raw.get(section, {}).get(key)
            if raw_value is None:
                values[section][key] = default
            else:
                try:
                    values[section][key] = convert(raw_value)
                except ValueError as exc:
                    raise InvariantError(f"{section}.{key}", str(exc)) from exc

    if seed_override is not None:
        values["run"]["master_seed"] = int(seed_override)
    master_seed = values["run"]["master_seed"]
    for section, key in (("data", "seed"), ("training", "shuffle_seed_base"), ("unlearn", "shuffle_seed")):
        if values[section][key] is DERIVED:
            values[section][key] = master_seed

    v = values
    if v["data"]["kind"] not in VALID_KINDS:
        raise InvariantError("data.kind", f"must be one of {VALID_KINDS}")
    if v["data"]["num_classes"] < 2:
        raise InvariantError("data.num_classes", "must be >= 2")
    if v["data"]["feature_dim"] < 1:
        raise InvariantError("data.feature_dim", "must be >= 1")
    if v["data"]["per_class"] < 1:
        raise InvariantError("data.per_class", "must be >= 1")
    if v["data"]["spread"] <= 0:
        raise InvariantError("data.spread", "must be positive")
    if v["data"]["n_clients"] < 1:
        raise InvariantError("data.n_clients", "must be >= 1")
    if v["data"]["kind"] == "idx" and not (v["data"]["idx_images"] and v["data"]["idx_labels"]):
        raise InvariantError("data.idx_images", "idx kind needs idx_images and idx_labels")
    if not 0 <= v["attack"]["attacker"] < v["data"]["n_clients"]:
        raise InvariantError(
            "attack.attacker", f"must lie in [0, {v['data']['n_clients']})"
        )
    for field in ("source_class", "target_class"):
        if not 0 <= v["attack"][field] < v["data"]["num_classes"]:
            raise InvariantError(
                f"attack.{field}", f"must lie in [0, {v['data']['num_classes']})"
            )
    if v["attack"]["source_class"] == v["attack"]["target_class"]:
        raise InvariantError("attack.target_class", "must differ from source_class")
    if not 0.0 <= v["attack"]["poison_fraction"] <= 1.0:
        raise InvariantError("attack.poison_fraction", "must lie in [0, 1]")
    if v["training"]["rounds"] < 0:
        raise InvariantError("training.rounds", "must be >= 0")
    if any(h < 1 for h in v["training"]["hidden_layers"]):
        raise InvariantError("training.hidden_layers", "all sizes must be >= 1")
    if v["unlearn"]["mode"] not in VALID_MODES:
        raise InvariantError("unlearn.mode", f"must be one of {VALID_MODES}")
    if v["unlearn"]["post_rounds"] < 0:
        raise InvariantError("unlearn.post_rounds", "must be >= 0")
    for fmt in v["output"]["formats"]:
        if fmt not in VALID_FORMATS:
            raise InvariantError("output.formats", f"{fmt!r} not one of {VALID_FORMATS}")

    flat = tuple(
        (f"{section}.{key}", _canonical(values[section][key]))
        for section in sorted(SCHEMA)
        for key in sorted(SCHEMA[section])
    )
    # output.* (directory, formats, resume) does not influence computed
    # results, so it is excluded from the hash that stamps artifacts
    digest = hashlib.sha256(
        "\n".join(
            f"{k}={val}" for k, val in flat if not k.startswith("output.")
        ).encode("utf-8")
    ).hexdigest()

    try:
        spec = BackdoorSpec(
            trigger_indices=v["attack"]["trigger_indices"],
            trigger_values=v["attack"]["trigger_values"],
            source_class=v["attack"]["source_class"],
            target_class=v["attack"]["target_class"],
            poison_fraction=v["attack"]["poison_fraction"],
        )
        local = LocalTrainConfig(
            local_epochs=v["training"]["local_epochs"],
            batch_size=v["training"]["batch_size"],
            learning_rate=v["training"]["learning_rate"],
            shuffle_seed_base=v["training"]["shuffle_seed_base"],
        )
        distill = DistillConfig(
            epochs=v["unlearn"]["epochs"],
            temperature=v["unlearn"]["temperature"],
            learning_rate=v["unlearn"]["learning_rate"],
            batch_size=v["unlearn"]["batch_size"],
            hard_label_weight=v["unlearn"]["hard_label_weight"],
            shuffle_seed=v["unlearn"]["shuffle_seed"],
        )
    except (ConfigurationError, DomainError) as exc:
        raise InvariantError("config", str(exc)) from exc

    return ExperimentConfig(
        data=DataSection(
            kind=v["data"]["kind"],
            num_classes=v["data"]["num_classes"],
            feature_dim=v["data"]["feature_dim"],
            per_class=v["data"]["per_class"],
            spread=v["data"]["spread"],
            seed=v["data"]["seed"],
            n_clients=v["data"]["n_clients"],
            idx_images=v["data"]["idx_images"],
            idx_labels=v["data"]["idx_labels"],
        ),
        attack=AttackSection(attacker=v["attack"]["attacker"], spec=spec),
        training=TrainingSection(
            rounds=v["training"]["rounds"],
            hidden_layers=v["training"]["hidden_layers"],
            local=local,
        ),
        unlearn=UnlearnSection(
            mode=v["unlearn"]["mode"],
            distill=distill,
            post_rounds=v["unlearn"]["post_rounds"],
        ),
        output=OutputSection(
            directory=v["output"]["directory"],
            formats=v["output"]["formats"],
            resume=v["output"]["resume"],
        ),
        master_seed=master_seed,
        config_hash=digest,
        flat=flat,
    )


def parse_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parse a config file into a fully-resolved ExperimentConfig.

    Distinct error classes: missing file, syntax error (with line number),
    unknown key, and invariant violation (naming the field).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser(
        delimiters=("=",), inline_comment_prefixes=("#", ";"), strict=True,
        interpolation=None,
    )
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigSyntaxError(str(exc.message), line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigSyntaxError("could not parse config", line=line) from exc
    except configparser.Error as exc:
        raise ConfigSyntaxError(str(exc)) from exc
    raw = {section: dict(parser.items(section)) for section in parser.sections()}
    return _resolve(raw, seed_override=seed_override)


def default_config(seed_override: Optional[int] = None, **section_overrides) -> ExperimentConfig:
    """The resolved desk-scale default config.

    ``section_overrides`` maps section name to a dict of raw string
    values, e.g. ``default_config(training={"rounds": "5"})``.
    """
    raw: dict[str, dict[str, str]] = {}
    for section, overrides in section_overrides.items():
        raw[section] = {k: str(val) for k, val in overrides.items()}
    return _resolve(raw, seed_override=seed_override)


def config_to_text(config: ExperimentConfig) -> str:
    """Render the resolved config back to the file format, for echoing
    into run directories."""
    lines = [f"# resolved config (hash {config.config_hash})"]
    current = None
    for key, value in config.flat:
        section, name = key.split(".", 1)
        if section != current:
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
