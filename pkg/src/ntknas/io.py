"""File formats: space files, run records, selected-architecture files and the
append-only benchmark cache. All writes go through a temp file and a rename.

Space file (JSON object, unknown keys rejected)::

  nodes       total cell nodes, inputs included
  catalog     list of operation names
  merge       "sum" or "concat"
  input       [n0] or [H, W, C]
  output      number of logits
  width       hidden width / channel count
  cells       stacked cells (default 1)
  seed        default weight seed (default 0)
  complexity  "small" or "large" (default "small")

Run records and caches are JSON lines. The first line of each is a header
carrying ``schema`` and enough configuration to replay the run.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .archspace import ArchId, CellSpace
from .data import atomic_write_bytes
from .tensor import ContractError

SCHEMA_VERSION = 1

SPACE_KEYS = {"nodes", "catalog", "merge", "input", "output", "width", "cells", "seed", "complexity"}
SPACE_REQUIRED = {"nodes", "catalog", "input", "output", "width"}

DEFAULT_SPACE = {
    "nodes": 4,
    "catalog": ["identity", "zero", "conv3x3-relu", "conv1x1-relu"],
    "merge": "sum",
    "input": [8, 8, 3],
    "output": 4,
    "width": 8,
    "cells": 1,
    "seed": 0,
    "complexity": "small",
}


def space_to_dict(space: CellSpace) -> dict:
    return {
        "nodes": space.num_nodes,
        "catalog": list(space.catalog),
        "merge": space.merge,
        "input": list(space.input_shape),
        "output": space.output_dim,
        "width": space.width,
        "cells": space.num_cells,
        "seed": space.seed,
        "complexity": space.complexity,
    }


def space_from_dict(d: dict) -> CellSpace:
    unknown = set(d) - SPACE_KEYS
    if unknown:
        raise ContractError(f"unknown space keys: {sorted(unknown)}")
    missing = SPACE_REQUIRED - set(d)
    if missing:
        raise ContractError(f"missing space keys: {sorted(missing)}")
    return CellSpace(
        num_nodes=int(d["nodes"]),
        catalog=tuple(d["catalog"]),
        input_shape=tuple(d["input"]),
        output_dim=int(d["output"]),
        width=int(d["width"]),
        merge=d.get("merge", "sum"),
        num_cells=int(d.get("cells", 1)),
        seed=int(d.get("seed", 0)),
        complexity=d.get("complexity", "small"),
    )


def default_space() -> CellSpace:
    return space_from_dict(DEFAULT_SPACE)


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def write_json(path, obj) -> None:
    atomic_write_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode())


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ContractError(f"{path}: invalid JSON ({e})") from None


def save_space(space: CellSpace, path) -> None:
    write_json(path, space_to_dict(space))


def load_space(path) -> CellSpace:
    return space_from_dict(read_json(path))


def write_jsonl(path, records: Iterable[dict]) -> None:
    payload = "".join(dumps(r) + "\n" for r in records)
    atomic_write_bytes(Path(path), payload.encode())


def read_jsonl(path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ContractError(f"{path}:{n}: invalid JSON line ({e})") from None
    return out


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    command: str
    config: dict  # everything needed to replay: space, data path, search config
    steps: list[dict]
    selection: dict
    wall_clock: float
    seed: int
    schema: int = SCHEMA_VERSION

    def lines(self) -> list[dict]:
        head = {"type": "header", "schema": self.schema, "command": self.command, "config": self.config, "seed": self.seed}
        tail = {"type": "final", "selection": self.selection, "wall_clock": self.wall_clock}
        return [head, *({"type": "step", **s} for s in self.steps), tail]

    def save(self, path) -> None:
        write_jsonl(path, self.lines())

    @classmethod
    def load(cls, path) -> "RunRecord":
        lines = read_jsonl(path)
        if not lines or lines[0].get("type") != "header" or lines[-1].get("type") != "final":
            raise ContractError(f"{path}: not a run record")
        head, tail = lines[0], lines[-1]
        if head["schema"] != SCHEMA_VERSION:
            raise ContractError(f"{path}: schema {head['schema']} not supported")
        steps = [{k: v for k, v in s.items() if k != "type"} for s in lines[1:-1]]
        return cls(head["command"], head["config"], steps, tail["selection"], tail["wall_clock"], head["seed"], head["schema"])


def selection_dict(space: CellSpace, arch: ArchId) -> dict:
    return {"arch": arch.key(), "describe": arch.describe(space), "space": space_to_dict(space)}


# ---------------------------------------------------------------------------
# benchmark cache


class CacheMismatch(ContractError):
    pass


def _close(a, b, rtol: float) -> bool:
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        return math.isclose(a, b, rel_tol=rtol, abs_tol=1e-12)
    return a == b


class BenchmarkCache:
    """Append-only JSON-lines cache of per-architecture records.

    The header pins the configuration the records were computed under; opening
    a cache with a different configuration is an error. Records are never
    rewritten: adding a record for a known architecture must agree with the
    stored one.
    """

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self.header = {"type": "header", "schema": SCHEMA_VERSION, **header}
        self.records: dict[str, dict] = {}
        if self.path.exists():
            lines = read_jsonl(self.path)
            if not lines or lines[0] != json.loads(dumps(self.header)):
                raise CacheMismatch(f"{self.path}: header does not match the requested configuration")
            for rec in lines[1:]:
                if rec["arch"] in self.records:
                    raise CacheMismatch(f"{self.path}: duplicate record for {rec['arch']}")
                self.records[rec["arch"]] = rec

    def __contains__(self, key: str) -> bool:
        return key in self.records

    def __len__(self) -> int:
        return len(self.records)

    def get(self, key: str) -> dict | None:
        return self.records.get(key)

    def check(self, rec: dict, rtol: float = 1e-9) -> None:
        old = self.records[rec["arch"]]
        for k, v in rec.items():
            if k not in old or not _close(old[k], v, rtol):
                raise CacheMismatch(f"{rec['arch']}: field {k!r} cached {old.get(k)!r}, recomputed {v!r}")

    def add(self, rec: dict, rtol: float = 1e-9) -> None:
        rec = json.loads(dumps(rec))
        if rec["arch"] in self.records:
            self.check(rec, rtol)
            return
        self.records[rec["arch"]] = rec
        self.flush()

    def flush(self) -> None:
        write_jsonl(self.path, [self.header, *self.records.values()])

    def rows(self, order: list[str] | None = None) -> list[dict]:
        if order is None:
            return list(self.records.values())
        return [self.records[k] for k in order]
