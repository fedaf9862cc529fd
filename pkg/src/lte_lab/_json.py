"""Versioned JSON helpers for model artifacts."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .errors import SchemaError

SCHEMA_MAJOR = 1
SCHEMA_VERSION = f"{SCHEMA_MAJOR}.0"


def dump(obj: dict[str, Any], path: str | Path, kind: str) -> None:
    payload = {"schema_version": SCHEMA_VERSION, "kind": kind, **obj}
    Path(path).write_text(dumps(payload), encoding="utf-8")


def dumps(payload: dict[str, Any]) -> str:
    # sort_keys + repr floats make the output byte-stable
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def check(payload: dict[str, Any], kind: str) -> dict[str, Any]:
    version = str(payload.get("schema_version", ""))
    major = version.split(".")[0]
    if major != str(SCHEMA_MAJOR):
        raise SchemaError(f"unsupported schema_version {version!r} for {kind}")
    if payload.get("kind", kind) != kind:
        raise SchemaError(f"expected a {kind} artifact, got {payload.get('kind')!r}")
    return payload


def load(path: str | Path, kind: str) -> dict[str, Any]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SchemaError(f"{kind} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{kind} file {path} is not valid JSON: {exc}") from exc
    return check(payload, kind)
