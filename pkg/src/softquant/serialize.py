"""Deterministic JSON / CSV writers."""

import csv
import json
import math

import numpy as np


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: line {e.lineno}: {e.msg}") from None


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])


def write_matrix(path, M, prefix="p"):
    M = np.asarray(M, dtype=float)
    write_table(path, [f"{prefix}{i}" for i in range(M.shape[1])], M.tolist())


def read_matrix(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r, None)
        rows = []
        for lineno, row in enumerate(r, start=2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
    return np.array(rows)
