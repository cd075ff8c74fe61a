"""Flat key=value experiment configuration.

Config files hold one "key = value" assignment per line ('#' comments and
blank lines allowed), with dotted namespaces (data.*, model.*, train.*,
cka_sr.*, sparsify.*, output.*). Unknown keys are rejected with the line
number. The resolved config is re-serialized canonically (sorted keys,
normalized values); its SHA-256 prefix names run directories and is embedded
in every output, so any run can be re-executed from its own artifacts.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .cka_sr import CkaSrConfig
from .data import Dataset, gen_blobs, gen_spirals, load_idx, standardize
from .linalg import Rng
from .model import ModelSpec, SparseMask, TrainConfig
from .sparsify import random_sparse_mask

__all__ = [
    "ConfigError",
    "default_raw_config",
    "parse_config_file",
    "apply_overrides",
    "resolve",
    "canonical_text",
    "config_hash",
    "make_datasets",
    "make_model_spec",
    "make_train_config",
    "make_mask",
]


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_stages(s: str) -> list[list[int]]:
    stages = []
    for part in s.split("/"):
        widths = [int(w) for w in part.split(",") if w.strip()]
        if not widths:
            raise ValueError("empty stage")
        stages.append(widths)
    return stages


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_sample_n(s: str):
    return None if s.strip().lower() == "all" else int(s)


def _choice(*options: str):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


# key -> (parser, default-as-string)
SCHEMA: dict[str, tuple] = {
    "data.kind": (_choice("spirals", "blobs", "idx"), "spirals"),
    "data.classes": (int, "3"),
    "data.per_class": (int, "200"),
    "data.eval_per_class": (int, "64"),
    "data.dim": (int, "2"),
    "data.spread": (float, "0.15"),
    "data.noise": (float, "0.18"),
    "data.turns": (float, "1.75"),
    "data.seed": (int, "7"),
    "data.standardize": (_parse_bool, "true"),
    "data.images": (str, ""),
    "data.labels": (str, ""),
    "data.eval_images": (str, ""),
    "data.eval_labels": (str, ""),
    "model.stages": (_parse_stages, "64,64,64,64,64,64"),
    "model.seed": (int, "-1"),
    "train.epochs": (int, "30"),
    "train.batch_size": (int, "32"),
    "train.learning_rate": (float, "0.1"),
    "train.momentum": (float, "0.9"),
    "train.weight_decay": (float, "1e-4"),
    "train.seed": (int, "1"),
    "cka_sr.beta": (float, "8e-4"),
    "cka_sr.variant": (_choice("standard", "augmented"), "standard"),
    "cka_sr.pair_weights": (_choice("uniform", "adjacent"), "uniform"),
    "cka_sr.sample_n": (_parse_sample_n, "8"),
    "cka_sr.batch_m": (int, "1"),
    "cka_sr.include_input": (_parse_bool, "true"),
    "sparsify.mask_ratio": (float, "0.0"),
    "sparsify.epsilons": (_parse_floats, "1e-4,1e-3,1e-2"),
    "output.dir": (str, "runs"),
}


def default_raw_config() -> dict[str, str]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _check_key(key: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key {key!r}")


def parse_config_file(path) -> dict[str, str]:
    """Defaults overlaid with the file's assignments."""
    raw = default_raw_config()
    try:
        lines = open(path).read().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        _check_key(key, f"{path}:{lineno}")
        raw[key] = value
    return raw


def apply_overrides(raw: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        _check_key(key, "--set")
        out[key] = value
    return out


def resolve(raw: dict[str, str]) -> dict[str, object]:
    """Parse every raw value through the schema; reject anything malformed."""
    resolved: dict[str, object] = {}
    for key, value in raw.items():
        _check_key(key, "config")
        parser = SCHEMA[key][0]
        try:
            resolved[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"config key {key}: {err}") from None
    if resolved["model.seed"] < 0:
        resolved["model.seed"] = resolved["train.seed"]
    return resolved


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "all"
    if isinstance(value, list):  # stages
        return "/".join(",".join(str(w) for w in stage) for stage in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(resolved: dict[str, object]) -> str:
    lines = [f"{key} = {_format_value(resolved[key])}" for key in sorted(resolved)]
    return "\n".join(lines) + "\n"


def config_hash(resolved: dict[str, object]) -> str:
    return hashlib.sha256(canonical_text(resolved).encode()).hexdigest()[:8]


def make_datasets(resolved: dict[str, object]) -> tuple[Dataset, Dataset]:
    kind = resolved["data.kind"]
    seed = resolved["data.seed"]
    classes = resolved["data.classes"]
    if kind == "spirals":
        train = gen_spirals(classes, resolved["data.per_class"],
                            resolved["data.noise"], Rng(seed), resolved["data.turns"])
        evaluation = gen_spirals(classes, resolved["data.eval_per_class"],
                                 resolved["data.noise"], Rng(seed, key=(1,)),
                                 resolved["data.turns"])
    elif kind == "blobs":
        train = gen_blobs(classes, resolved["data.per_class"], resolved["data.dim"],
                          resolved["data.spread"], Rng(seed))
        evaluation = gen_blobs(classes, resolved["data.eval_per_class"],
                               resolved["data.dim"], resolved["data.spread"],
                               Rng(seed, key=(1,)))
    else:
        for key in ("data.images", "data.labels", "data.eval_images", "data.eval_labels"):
            if not resolved[key]:
                raise ConfigError(f"data.kind=idx requires {key}")
        train = load_idx(resolved["data.images"], resolved["data.labels"])
        evaluation = load_idx(resolved["data.eval_images"], resolved["data.eval_labels"])
    evaluation.split = "eval"
    if resolved["data.standardize"]:
        train, evaluation = standardize(train, evaluation)
    return train, evaluation


def make_model_spec(resolved: dict[str, object], input_dim: int, num_classes: int) -> ModelSpec:
    return ModelSpec(
        stages=[list(s) for s in resolved["model.stages"]],
        input_dim=input_dim,
        num_classes=num_classes,
        seed=resolved["model.seed"],
    )


def make_mask(resolved: dict[str, object], spec: ModelSpec) -> SparseMask | None:
    ratio = resolved["sparsify.mask_ratio"]
    if ratio == 0.0:
        return None
    # mask is part of the experimental condition; give it its own stream
    return random_sparse_mask(spec, ratio, Rng(resolved["train.seed"], key=(33,)))


def make_train_config(resolved: dict[str, object], mask: SparseMask | None) -> TrainConfig:
    cka = CkaSrConfig(
        beta=resolved["cka_sr.beta"],
        pair_weights=resolved["cka_sr.pair_weights"],
        variant=resolved["cka_sr.variant"],
        sample_n=resolved["cka_sr.sample_n"],
        batch_m=resolved["cka_sr.batch_m"],
        include_input_layer=resolved["cka_sr.include_input"],
    )
    return TrainConfig(
        epochs=resolved["train.epochs"],
        batch_size=resolved["train.batch_size"],
        learning_rate=resolved["train.learning_rate"],
        momentum=resolved["train.momentum"],
        weight_decay=resolved["train.weight_decay"],
        seed=resolved["train.seed"],
        cka_sr=cka,
        mask=mask,
        epsilons=resolved["sparsify.epsilons"],
    )
