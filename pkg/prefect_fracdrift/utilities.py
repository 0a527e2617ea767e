"""Utilities for hashing run settings and writing lab artifacts."""

import hashlib
import json
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
from prefect.utilities.collections import visit_collection

from prefect_fracdrift._version import __version__

FLOAT_FORMAT = "%.17g"


def stable_hash(collection: Any) -> str:
    """Use visit_collection to canonicalize and hash a collection.

    Unlike the builtin `hash`, the digest is stable across interpreter sessions,
    so it can be stored in manifests.

    Args:
        collection (Any): The collection to hash.

    Returns:
        str: Hex SHA-256 digest of the canonical collection.

    Example:
        ```python
        from prefect_fracdrift.utilities import stable_hash

        stable_hash({"alpha": 1.5, "grid": {"h": 0.05}})
        ```

    """

    def make_hashable(item):
        """Make an item canonical by converting it to sorted tuples."""
        if isinstance(item, dict):
            return tuple(sorted((str(k), make_hashable(v)) for k, v in item.items()))
        elif isinstance(item, (list, tuple)):
            return tuple(make_hashable(v) for v in item)
        elif isinstance(item, float):
            return FLOAT_FORMAT % item
        elif isinstance(item, Path):
            return str(item)
        return item

    canonical = visit_collection(collection, visit_fn=make_hashable, return_data=True)
    payload = json.dumps(canonical, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


def write_csv(
    path: Union[str, Path],
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
) -> Path:
    """
    Writes rows to a CSV file, formatting floats with 17 significant digits.

    Args:
        path: Destination file.
        header: Column names, written as the first line.
        rows: Row values; floats are formatted with `%.17g`, anything else with
            `str`.

    Returns:
        The path that was written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_value(value) for value in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_json(path: Union[str, Path], document: Dict[str, Any]) -> Path:
    """
    Writes a JSON document with sorted keys and numpy scalars converted.

    Args:
        path: Destination file.
        document: The document to write.

    Returns:
        The path that was written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_to_builtin(document), indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(
    artifact: Union[str, Path],
    config_hash: str,
    started: float,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Writes `<artifact>.manifest.json` next to an output file.

    Args:
        artifact: The output file the manifest describes.
        config_hash: Digest of the run configuration, see `stable_hash`.
        started: `time.perf_counter()` reading taken when the stage started.
        extra: Additional entries recorded in the manifest.

    Returns:
        The manifest path.
    """
    artifact = Path(artifact)
    manifest = {
        "artifact": artifact.name,
        "config_hash": config_hash,
        "code_version": __version__,
        "wall_time_seconds": time.perf_counter() - started,
    }
    manifest.update(extra or {})
    return write_json(artifact.with_name(artifact.name + ".manifest.json"), manifest)


def _format_value(value: Any) -> str:
    """Formats one CSV cell."""
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


def _to_builtin(item: Any) -> Any:
    """Converts numpy values, paths and non-finite floats to JSON types."""
    if isinstance(item, dict):
        return {str(k): _to_builtin(v) for k, v in item.items()}
    if isinstance(item, (list, tuple)):
        return [_to_builtin(v) for v in item]
    if isinstance(item, np.ndarray):
        return [_to_builtin(v) for v in item.tolist()]
    if isinstance(item, np.bool_):
        return bool(item)
    if isinstance(item, np.integer):
        return int(item)
    if isinstance(item, (float, np.floating)):
        value = float(item)
        if not np.isfinite(value):
            return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
        return value
    if isinstance(item, Path):
        return str(item)
    return item
