"""Run configuration: a sectioned key = value file plus command-line overrides."""
from __future__ import annotations

import itertools
from dataclasses import fields
from pathlib import Path

from .stream_data import PROTOCOLS, SynthConfig
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
        self.key = key


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


REQUIRED = object()

# key -> (section, parser, default)
SCHEMA = {
    "seed": ("run", int, REQUIRED),
    "output_dir": ("run", str, "runs/default"),
    "label": ("run", str, ""),
    "dataset": ("run", str, "synthetic"),
    "pretrain_dataset": ("run", str, "synthetic"),
    "protocol": ("run", str, "class_instance"),
    "classes_per_task": ("run", int, 2),
    "eval_batch_size": ("run", int, 100),
    "eval_partition_seed": ("run", int, 0),
    "filter_runs": ("run", _bool, False),
    "stream_classes": ("synth", int, 10),
    "pretrain_classes": ("synth", int, 8),
    "objects_per_class": ("synth", int, 3),
    "instances_per_object": ("synth", int, 6),
    "test_instances_per_object": ("synth", int, 2),
    "frames_per_instance": ("synth", int, 8),
    "image_side": ("synth", int, 56),
    "rho": ("synth", float, 0.9),
    "drift_scale": ("synth", float, 0.25),
    "noise_scale": ("synth", float, 0.05),
    "object_scale": ("synth", float, 0.35),
}
_PARSERS = {"bool": _bool, "int": int, "float": float, "str": str}
for _f in fields(TrainConfig):
    if _f.name != "seed":
        SCHEMA[_f.name] = ("train", _PARSERS[getattr(_f.type, "__name__", _f.type)], _f.default)

SECTIONS = sorted({v[0] for v in SCHEMA.values()}) + ["ablate"]


def parse_text(text):
    """Parse sectioned ``key = value`` text into {section: {key: (value, line)}}."""
    out, section = {}, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        out[section][key] = (value, lineno)
    return out


def resolve(raw_sections, overrides=None):
    """Validate parsed sections plus ``overrides`` ({key: text}); returns
    (flat settings dict, ablation grid dict)."""
    overrides = overrides or {}
    values, grid = {}, {}
    for section, items in raw_sections.items():
        for key, (text, line) in items.items():
            if section == "ablate":
                if key not in SCHEMA:
                    raise ConfigError(f"unknown ablation key {key!r}", line, key)
                grid[key] = [_convert(key, v.strip(), line) for v in text.split(",") if v.strip()]
                continue
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, key)
            if SCHEMA[key][0] != section:
                raise ConfigError(f"key {key!r} belongs in [{SCHEMA[key][0]}], not [{section}]", line, key)
            values[key] = _convert(key, text, line)
    for key, text in overrides.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", key=key)
        values[key] = _convert(key, text, None)
    for key, (_, _, default) in SCHEMA.items():
        if key not in values:
            if default is REQUIRED:
                if key in grid:
                    continue
                raise ConfigError(f"missing required key {key!r}", key=key)
            values[key] = default
    if grid:
        return values, grid
    validate(values)
    return values, grid


def _convert(key, text, line):
    parser = SCHEMA[key][1]
    try:
        return parser(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}", line, key) from None


def validate(values):
    if values["protocol"] not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {', '.join(PROTOCOLS)}", key="protocol")
    if values["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}", key="mode")
    try:
        train_config(values)
        synth_config(values, "stream")
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load(path, overrides=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return resolve(parse_text(text), overrides)


def dump(values):
    """Canonical text of a resolved configuration."""
    lines = []
    for section in SECTIONS:
        keys = sorted(k for k, v in SCHEMA.items() if v[0] == section and k in values)
        if not keys:
            continue
        lines.append(f"[{section}]")
        for k in keys:
            v = values[k]
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)


def expand_grid(values, grid):
    """One (name, settings) pair per point of the ablation grid."""
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        child = dict(values)
        child.update(zip(keys, combo))
        validate(child)
        yield ",".join(f"{k}={v}" for k, v in zip(keys, combo)), child


def train_config(values):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in names})


def synth_config(values, which):
    common = dict(
        objects_per_class=values["objects_per_class"],
        instances_per_object=values["instances_per_object"],
        test_instances_per_object=values["test_instances_per_object"],
        frames_per_instance=values["frames_per_instance"],
        image_side=values["image_side"],
        rho=values["rho"],
        drift_scale=values["drift_scale"],
        noise_scale=values["noise_scale"],
        object_scale=values["object_scale"],
        seed=values["seed"],
    )
    if which == "stream":
        return SynthConfig(classes=values["stream_classes"], class_offset=0, **common)
    return SynthConfig(classes=values["pretrain_classes"], class_offset=1000, **common)
