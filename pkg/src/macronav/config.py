"""Run configuration: plain key=value files with includes and typed schemas.

A config file is a sequence of lines, each blank, a ``#`` comment, an
``include other.cfg`` directive (resolved relative to the including file), or
a ``key = value`` assignment.  Later assignments win, so an including file
overrides anything its includes set.  Command-line overrides are applied
after the file, and every key is checked against the schema of the
subcommand being run: unknown keys, missing required keys, unparseable
values, and out-of-range values are all reported together by name.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable

from .errors import ConfigError
from .gridmap import DEFAULT_RESOLUTION, MAP_STYLES

_REQUIRED = object()


@dataclasses.dataclass(frozen=True)
class Field:
    parse: Callable[[str], object]
    default: object = _REQUIRED
    check: Callable[[object], bool] | None = None
    expect: str = ""

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


def _int_field(default=_REQUIRED, lo: int | None = None,
               hi: int | None = None) -> Field:
    return _num_field(int, default, lo, hi)


def _float_field(default=_REQUIRED, lo: float | None = None,
                 hi: float | None = None, open_lo: bool = False) -> Field:
    return _num_field(float, default, lo, hi, open_lo)


def _num_field(typ, default, lo, hi, open_lo: bool = False) -> Field:
    def check(v) -> bool:
        if lo is not None and (v <= lo if open_lo else v < lo):
            return False
        return hi is None or v <= hi

    bounds = []
    if lo is not None:
        bounds.append(f"> {lo}" if open_lo else f">= {lo}")
    if hi is not None:
        bounds.append(f"<= {hi}")
    return Field(typ, default, check if bounds else None,
                 "must be " + " and ".join(bounds))


def _choice_field(default, *options: str) -> Field:
    return Field(str, default, lambda v: v in options,
                 "must be one of " + ", ".join(options))


def _optional_float(raw: str) -> float | None:
    return None if raw.strip().lower() == "none" else float(raw)


# ---------------------------------------------------------------------------
# per-subcommand schemas


def _encoder_fields(prefix: str = "") -> dict[str, Field]:
    """Architecture keys shared by pretraining and attention export."""
    return {
        f"{prefix}d": _int_field(128, lo=8),
        f"{prefix}layers": _int_field(4, lo=1),
        f"{prefix}heads": _int_field(4, lo=1),
        f"{prefix}patch": _int_field(8, lo=1),
        f"{prefix}dec_d": _int_field(128, lo=8),
        f"{prefix}dec_layers": _int_field(2, lo=1),
        f"{prefix}dec_heads": _int_field(4, lo=1),
    }


def _env_fields() -> dict[str, Field]:
    return {
        "n_nodes": _int_field(20, lo=1),
        "knn": _int_field(10, lo=1),
        "ctx_hw": _int_field(128, lo=8),
        "max_steps": _int_field(128, lo=1),
    }


SCHEMAS: dict[str, dict[str, Field]] = {
    "gen-maps": {
        "count": _int_field(10, lo=1),
        "size": _int_field(128, lo=32),
        "style": _choice_field("mixed", *MAP_STYLES, "mixed"),
        "density": _float_field(0.15, lo=0.0, hi=1.0),
        "resolution": _float_field(DEFAULT_RESOLUTION, lo=0.0, open_lo=True),
    },
    "pretrain": {
        "steps": _int_field(2000, lo=1),
        "batch": _int_field(8, lo=1),
        "lr": _float_field(1e-4, lo=0.0, open_lo=True),
        "weight_decay": _float_field(0.0, lo=0.0),
        "map_hw": _int_field(128, lo=8),
        "maps_per_source": _int_field(64, lo=1),
        "partial_frac": _float_field(0.5, lo=0.0, hi=1.0),
        "log_every": _int_field(50, lo=0),
        **_encoder_fields(),
    },
    "train-rl": {
        "episodes": _int_field(200, lo=1),
        "level": _choice_field("easy", "easy", "medium", "hard"),
        "gamma": _float_field(0.99, lo=0.0, hi=1.0, open_lo=True),
        "tau": _float_field(0.005, lo=0.0, hi=1.0, open_lo=True),
        "lr": _float_field(1e-5, lo=0.0, open_lo=True),
        "alpha_init": _float_field(0.2, lo=0.0, open_lo=True),
        "fixed_alpha": Field(_optional_float, None,
                             lambda v: v is None or v > 0.0,
                             "must be > 0 or none"),
        "entropy_coef": _float_field(0.4, lo=0.0, hi=1.0, open_lo=True),
        "batch_size": _int_field(64, lo=1),
        "replay": _int_field(10000, lo=1),
        "warmup": _int_field(256, lo=0),
        "updates_per_episode": _int_field(32, lo=0),
        "budget_s": _float_field(0.0, lo=0.0),
        "log_every": _int_field(10, lo=0),
        "d": _int_field(128, lo=8),
        "layers": _int_field(6, lo=1),
        "heads": _int_field(8, lo=1),
        **{f"enc_{k}": f for k, f in _encoder_fields().items()},
        **_env_fields(),
    },
    "eval": {
        "overlays": _int_field(5, lo=0),
        **_env_fields(),
    },
    "inspect-masks": {
        "grid": _int_field(16, lo=2),
        "samples": _int_field(4, lo=1),
        "scale": _int_field(8, lo=1),
    },
    "export-attention": {
        "layer": _int_field(0, lo=0),
        "head": _int_field(0, lo=0),
        "map_hw": _int_field(128, lo=8),
        "style": _choice_field("rooms", *MAP_STYLES),
        "density": _float_field(0.15, lo=0.0, hi=1.0),
        "map_seed": _int_field(0, lo=0),
        **_encoder_fields(),
    },
    "env-server": {},
}


# ---------------------------------------------------------------------------
# parsing and validation


def parse_kv_file(path) -> dict[str, str]:
    """Raw key -> value strings with includes flattened, later lines winning."""
    return _parse_kv(Path(path), ())


def _parse_kv(path: Path, stack: tuple) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.resolve() in stack:
        chain = " -> ".join(str(p) for p in (*stack, path.resolve()))
        raise ConfigError(f"circular include: {chain}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text.startswith("include ") or text == "include":
            target = text[len("include"):].strip()
            if not target:
                raise ConfigError(f"{path}:{lineno}: include without a path")
            out.update(_parse_kv(path.parent / target,
                                 (*stack, path.resolve())))
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, "
                              f"got {text!r}")
        key, _, value = text.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_overrides(raw: dict[str, str], overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()


def validate_config(command: str, path=None,
                    overrides: list[str] | None = None) -> dict:
    """Typed, range-checked config for one subcommand.

    File values come first, overrides second; all problems are raised as one
    ConfigError naming every offending key.
    """
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    raw = parse_kv_file(path) if path is not None else {}
    apply_overrides(raw, overrides or [])

    problems = []
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        problems.append("unknown keys: " + ", ".join(unknown))

    out: dict = {}
    for name, field in schema.items():
        if name in raw:
            try:
                value = field.parse(raw[name])
            except ValueError:
                problems.append(f"{name}: cannot parse {raw[name]!r}")
                continue
        elif field.required:
            problems.append(f"{name}: required key missing")
            continue
        else:
            value = field.default
        if name in raw and field.check is not None and not field.check(value):
            problems.append(f"{name} {field.expect} (got {raw[name]})")
            continue
        out[name] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return out
