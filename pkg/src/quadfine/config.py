"""Plain key=value run configuration.

One ``KEY=VALUE`` per line, ``#`` comments, unknown keys rejected by name.
Every command writes its resolved configuration next to its outputs (output
locations themselves are excluded so reruns into different directories stay
bit-identical).
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(Exception):
    """Bad configuration: unknown key, unparsable value, missing requirement."""


class DataError(Exception):
    """Missing or malformed data files."""


def _bool(text: str) -> bool:
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); None default means "unset"
SCHEMA: dict[str, tuple] = {
    "count": (int, 250),
    "train_fraction": (float, 0.8),
    "channels": (int, 32),
    "noise_p": (float, 0.9),
    "noise_radius": (int, 2),
    "texture_amp": (float, 0.25),
    "sdt_noise_px": (float, 0.2),
    "model_channels": (int, 64),
    "heads": (int, 4),
    "layers": (int, 3),
    "cap_per_level": (int, 100),
    "depth": (int, 3),
    "propagation": (str, "full"),
    "epochs": (int, 10),
    "lr": (float, 0.2),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "train_target": (str, "refiner"),
    "joint_detector": (_bool, False),
    "guidance": (_bool, True),
    "val_limit": (int, 16),
    "band": (int, 0),
    "manifest": (str, None),
    "bench_channels": (int, 256),
    "bench_heads": (int, 4),
    "bench_layers": (int, 3),
}


def parse_config_text(text: str) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected KEY=VALUE, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    return values


def load_config(path: str | Path | None) -> dict[str, object]:
    """Defaults overlaid with the config file (when given)."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        resolved.update(parse_config_text(p.read_text("utf-8")))
    return resolved


def format_config(values: dict[str, object]) -> str:
    lines = []
    for key in SCHEMA:
        v = values.get(key)
        if v is None:
            continue
        if isinstance(v, bool):
            v = int(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def write_resolved(values: dict[str, object], out_dir: str | Path, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved.cfg"
    path.write_text(f"# resolved configuration (seed={seed})\n" + format_config(values),
                    encoding="utf-8")
    return path
