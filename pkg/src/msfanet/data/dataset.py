"""Directory-level dataset helpers: index files and bulk loading.

A dataset directory holds one PNG + one JSON sidecar per sample plus an
``index.json`` listing sample ids in canonical order.
"""

from __future__ import annotations

import glob
import json
import os

from ..errors import LoadError
from .annotations import load_annotations

INDEX_NAME = "index.json"


def write_index(directory, entries, extra=None) -> str:
    doc = {"version": 1, "samples": list(entries)}
    if extra:
        doc.update(extra)
    path = os.path.join(directory, INDEX_NAME)
    payload = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if os.path.exists(path):  # idempotent reruns leave up-to-date files alone
        try:
            with open(path) as f:
                if f.read() == payload:
                    return path
        except OSError:
            pass
    with open(path, "w") as f:
        f.write(payload)
    return path


def read_index(directory) -> dict:
    path = os.path.join(directory, INDEX_NAME)
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise LoadError(f"dataset index not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError(f"cannot parse dataset index {path}: {e}") from e


def list_sidecars(directory):
    """Sidecar paths in id order; uses the index when present, else globs."""
    index_path = os.path.join(directory, INDEX_NAME)
    if os.path.exists(index_path):
        doc = read_index(directory)
        return [os.path.join(directory, s["sidecar"]) for s in doc["samples"]]
    paths = sorted(glob.glob(os.path.join(directory, "*.json")))
    return [p for p in paths
            if not p.endswith(".den.json") and os.path.basename(p) != INDEX_NAME]


def load_dataset(directory) -> list:
    """Load every sample of a dataset directory (sorted, deterministic)."""
    return [load_annotations(p) for p in list_sidecars(directory)]
