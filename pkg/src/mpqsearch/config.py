"""Flat ``key = value`` run configuration with dotted section prefixes."""

from __future__ import annotations

import hashlib
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import __version__


class ConfigError(ValueError):
    """Bad config file, unknown key or unparsable value."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _opt_float(text: str) -> float | None:
    t = text.strip().lower()
    return None if t in ("", "none") else float(t)


def _str(text: str) -> str:
    return text.strip()


_DATA_KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "format": (_str, None),  # synthetic | cifar-binary | raw-tensor
    "path": (_str, ""),
    "classes": (int, 2),
    "n": (int, 2000),
    "shape": (_ints, (3, 16, 16)),
    "seed": (int, 1),
    "noise": (float, 0.3),
    "amplitude": (float, 1.0),
    "labels": (_ints, ()),
    "mean": (_floats, ()),
    "std": (_floats, ()),
    "test_fraction": (float, 0.25),
}

SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "run.seed": (int, 0),
    "run.output_dir": (_str, "out"),
    "model.layers": (_str, "conv16x3 relu maxpool conv32x3 relu maxpool conv32x3 relu gap linear"),
    "model.act_max": (float, 4.0),
    "fp.epochs": (int, 5),
    "fp.lr": (float, 0.01),
    "fp.batch_size": (int, 32),
    "search.zeta": (float, 1e-8),
    "search.eta": (float, 10.0),
    "search.qw0": (float, 4.0),
    "search.qa0": (float, 6.0),
    "search.topk": (int, 1000),
    "search.epochs": (int, 2),
    "search.batch_size": (int, 64),
    "search.lr_weights": (float, 1e-3),
    "search.lr_logits": (float, 1e-2),
    "search.bops_budget": (_opt_float, None),
    "search.w_bits": (_ints, (2, 3, 4)),
    "search.a_bits": (_ints, (2, 3, 4)),
    "search.p_mode": (_str, "capacity"),
    "search.p_fixed": (float, 1.0),
    "search.support": (_str, "topk"),
    "search.quantize_first": (_bool, True),
    "search.val_split": (_bool, False),
    "finetune.epochs": (int, 2),
    "finetune.lr": (float, 1e-3),
    "finetune.batch_size": (int, 64),
    "finetune.init": (_str, "fp"),
    "eval.topk": (int, 100),
    "report.samples": (int, 6),
}
for _role in ("search", "deploy"):
    for _k, _v in _DATA_KEYS.items():
        SCHEMA[f"data.{_role}.{_k}"] = _v

REQUIRED = ("data.search.format", "data.deploy.format")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value-text`` pairs; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


@dataclass
class RunConfig:
    values: dict[str, Any]
    raw: dict[str, str]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix.rstrip(".") + "."
        return {k[len(p) :]: v for k, v in self.values.items() if k.startswith(p)}

    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self.values["run.output_dir"])


def build_config(raw: dict[str, str], source: str = "<config>") -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"{source}: missing required key(s) {', '.join(missing)}")
    values = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        else:
            values[key] = default
    return RunConfig(values, dict(raw))


def load_config(path, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Read a config file and apply ``key=value`` overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = parse_text(path.read_text(), str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    return build_config(raw, str(path))


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
