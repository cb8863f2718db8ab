"""
Artifact writers
CSV through pandas, JSON and JSON-lines through the json module, all floats at 17 significant digits
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Mapping

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def utc_timestamp() -> str:
    """ISO-8601 UTC timestamp used for the generated_at field"""
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy types, dataclasses and tuples into plain JSON values

    Floats are rounded through 17 significant digits; non-finite floats
    become the strings "inf", "-inf" and "nan".
    """
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return float(f"{x:.17g}")
    return value


def dumps(payload: Any) -> str:
    """Deterministic JSON text (sorted keys)"""
    return json.dumps(to_jsonable(payload), sort_keys=True)


def params_digest(params: Mapping[str, Any]) -> str:
    """Short sha256 digest of a parameter mapping, stable across runs"""
    return hashlib.sha256(dumps(params).encode("utf-8")).hexdigest()[:16]


def write_json(path: str, payload: Dict[str, Any], stamp: bool = True) -> str:
    """
    Write a JSON artifact

    Args:
        path: Destination file
        payload: Mapping to serialize
        stamp: Whether to add the generated_at field

    Returns:
        The path written
    """
    body = dict(payload)
    if stamp:
        body["generated_at"] = utc_timestamp()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_jsonable(body), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("📁 Wrote %s", path)
    return path


def append_jsonl(path: str, record: Dict[str, Any]) -> None:
    """Append one JSON object as a line"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a") as f:
        f.write(dumps(record) + "\n")


def write_csv(path: str, columns: Dict[str, Any], order: List[str]) -> str:
    """
    Write a CSV artifact with 17-significant-digit floats

    Args:
        path: Destination file
        columns: Column name -> sequence of values
        order: Column order in the file

    Returns:
        The path written
    """
    frame = pd.DataFrame({name: columns[name] for name in order}, columns=order)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("📁 Wrote %s (%d rows)", path, len(frame))
    return path
