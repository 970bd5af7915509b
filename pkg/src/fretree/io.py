"""Run configuration, table and sample readers, and deterministic writers.

Config grammar: one ``key = value`` per line; ``#`` starts a comment; blank
lines are ignored; keys are case-insensitive; list values are comma
separated. Unknown keys and repeated keys are errors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .distributions import QuantileTable
from .errors import ConfigError, InputError

FLOAT_KEYS = ("alpha", "beta", "delta", "rho", "gamma", "load", "s0", "pnl", "exposure",
              "lambda", "u", "epsilon", "theta")
INT_KEYS = ("stages", "seed", "trajectories", "sample_size", "n")
LIST_KEYS = ("branchiness", "thetas", "loads")
STR_KEYS = ("form", "family", "law", "tree")
KEYS = FLOAT_KEYS + INT_KEYS + LIST_KEYS + STR_KEYS

DEFAULTS = {
    "alpha": 0.2, "beta": 0.5, "delta": 0.05, "rho": 1.0, "gamma": 0.5, "load": 0.05,
    "s0": 322.56, "pnl": 0.6779, "seed": 0, "trajectories": 64,
    "lambda": 0.5, "u": 1.0, "epsilon": 0.0, "sample_size": 1001,
    "branchiness": [3, 3, 3], "thetas": [0.0, 0.05, 0.1, 0.2, 0.5],
    "loads": [0.0, 0.05, 0.1, 0.2, 0.5], "n": 4, "form": "quadratic",
    "family": "frechet", "law": "frechet",
}


def _convert(key: str, raw: str, where: str):
    try:
        if key in FLOAT_KEYS:
            return float(raw)
        if key in INT_KEYS:
            v = int(raw)
            if key == "seed" and not 0 <= v < 2 ** 64:
                raise ValueError("seed must be an unsigned 64-bit integer")
            return v
        if key in LIST_KEYS:
            parts = [p.strip() for p in raw.strip("[]").split(",") if p.strip()]
            if not parts:
                raise ValueError("empty list")
            return [int(p) for p in parts] if key == "branchiness" else [float(p) for p in parts]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: repeated key {key!r}")
        if not raw:
            raise ConfigError(f"{where}: missing value for {key!r}")
        out[key] = _convert(key, raw, where)
    return out


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> dict:
    """Defaults, then file keys, then non-None overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_config(read_text(path), path))
        if "tree" in cfg and not os.path.isabs(cfg["tree"]):
            cfg["tree"] = str(Path(path).parent / cfg["tree"])
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Tables and samples
# --------------------------------------------------------------------------


def fixture_names() -> list:
    root = resources.files("fretree") / "fixtures"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".csv"))


def fixture_text(name: str) -> str:
    root = resources.files("fretree") / "fixtures"
    res = root / (name if name.endswith(".csv") else name + ".csv")
    if not res.is_file():
        raise InputError(f"no fixture named {name!r}; known: {', '.join(fixture_names())}")
    return res.read_text(encoding="utf-8")


def _data_rows(text: str, source: str):
    """Header and rows of a CSV, plus ``# key: value`` comment metadata."""
    meta, lines = {}, []
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("#"):
            body = s[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                meta[k.strip().lower()] = v.strip()
        elif s:
            lines.append(s)
    if not lines:
        raise InputError(f"{source}: no header row")
    rows = list(csv.reader(lines))
    return [h.strip().lower() for h in rows[0]], rows[1:], meta


def parse_table(text: str, source: str = "<table>") -> QuantileTable:
    header, rows, meta = _data_rows(text, source)
    if header != ["probability", "loss"]:
        raise InputError(f"{source}: expected header 'probability,loss', got {','.join(header)!r}")
    try:
        p = [float(r[0]) for r in rows]
        L = [float(r[1]) for r in rows]
        pnl = float(meta["pnl"]) if "pnl" in meta else None
    except (ValueError, IndexError) as exc:
        raise InputError(f"{source}: malformed row: {exc}") from exc
    return QuantileTable(p, L, pnl)


def read_table(path_or_fixture: str) -> QuantileTable:
    if os.path.exists(path_or_fixture):
        return parse_table(read_text(path_or_fixture), path_or_fixture)
    name = path_or_fixture.removesuffix(".csv")
    if name not in fixture_names():
        raise InputError(f"file not found: {path_or_fixture}")
    return parse_table(fixture_text(name), path_or_fixture)


def read_sample(path: str) -> list:
    """One-column CSV of loss values with a ``loss`` or ``value`` header."""
    header, rows, _ = _data_rows(read_text(path), path)
    if header not in (["loss"], ["value"]):
        raise InputError(f"{path}: expected a single 'loss' or 'value' column")
    try:
        return [float(r[0]) for r in rows]
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed row: {exc}") from exc


# --------------------------------------------------------------------------
# Writers and manifest
# --------------------------------------------------------------------------


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    artifacts: dict = field(default_factory=dict)
    wall_clock: Optional[float] = None

    def to_dict(self) -> dict:
        out = {"command": self.command, "config": self.config, "seed": self.seed,
               "version": self.version, "artifacts": self.artifacts}
        if self.wall_clock is not None:
            out["wall_clock_seconds"] = self.wall_clock
        return out


class OutputDir:
    """Writes UTF-8 artifacts and records their digests for the manifest."""

    def __init__(self, path: str):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InputError(f"cannot create output directory {path}: {exc}") from exc
        self.written = {}

    def write(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        target = self.path / name
        target.write_bytes(data)
        self.written[name] = hashlib.sha256(data).hexdigest()
        return target

    def write_json(self, name: str, obj) -> Path:
        return self.write(name, dumps(obj))

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest.artifacts = {k: {"sha256": v} for k, v in sorted(self.written.items())}
        return self.write("manifest.json", dumps(manifest.to_dict()))
