"""On-disk formats: the binary embedding container, run configuration
files, and the CSV conventions shared by the CLI.

Embeddings are stored as 32-bit little-endian floats behind a fixed
header; everything human-facing is plain comma-separated text with '.'
decimals, independent of locale.
"""

import struct
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .alignment import AlignConfig, COST_MODES, PromptFeature, PromptSet
from .ot import SinkhornSettings
from .trainer import PromptParams, TaskSpec, TrainConfig

__all__ = [
    "MAGIC",
    "VERSION",
    "write_embeddings",
    "read_embeddings",
    "parse_run_config",
    "format_float",
    "write_csv_matrix",
    "read_csv_matrix",
    "write_params_csv",
    "read_params_csv",
]

MAGIC = b"ALGNEMB1"
VERSION = 1
_SIDES = ("image", "class")


def write_embeddings(path, sets: Sequence[PromptSet], side: str) -> None:
    """Serialize prompt sets: header, then per set the globals and
    row-major token matrices as float32."""
    if side not in _SIDES:
        raise ValueError(f"side must be one of {_SIDES}")
    sets = list(sets)
    if not sets:
        raise ValueError("no prompt sets to write")
    per_set = len(sets[0])
    d = sets[0].dim
    if any(len(s) != per_set or s.dim != d for s in sets):
        raise ValueError("all prompt sets must share prompt count and dim")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", VERSION, _SIDES.index(side), len(sets), per_set))
        fh.write(struct.pack("<I", d))
        counts = [p.token_count for s in sets for p in s.prompts]
        fh.write(struct.pack(f"<{len(counts)}I", *counts))
        for s in sets:
            for p in s.prompts:
                fh.write(p.global_.astype("<f4").tobytes())
                fh.write(np.ascontiguousarray(p.tokens).astype("<f4").tobytes())


def read_embeddings(path) -> Tuple[List[PromptSet], str]:
    """Parse an embedding file; inverse of write_embeddings at 32-bit
    precision."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an embedding file")
    version, side_idx, count, per_set = struct.unpack_from("<4I", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if side_idx >= len(_SIDES) or count < 1 or per_set < 1:
        raise ValueError(f"{path}: malformed header")
    (d,) = struct.unpack_from("<I", blob, 24)
    offset = 28
    n_counts = count * per_set
    counts = struct.unpack_from(f"<{n_counts}I", blob, offset)
    offset += 4 * n_counts
    expected = 4 * sum(d + t * d for t in counts)
    if len(blob) - offset != expected:
        raise ValueError(f"{path}: payload length {len(blob) - offset} != declared {expected}")

    sets = []
    idx = 0
    for _ in range(count):
        prompts = []
        for _ in range(per_set):
            t = counts[idx]
            idx += 1
            g = np.frombuffer(blob, dtype="<f4", count=d, offset=offset).astype(np.float64)
            offset += 4 * d
            tok = np.frombuffer(blob, dtype="<f4", count=t * d,
                                offset=offset).astype(np.float64).reshape(t, d)
            offset += 4 * t * d
            prompts.append(PromptFeature(g, tok))
        sets.append(PromptSet(tuple(prompts), _SIDES[side_idx]))
    return sets, _SIDES[side_idx]


# --- run configuration -------------------------------------------------

_CONFIG_DEFAULTS = {
    # synthetic task
    "k": 3, "shots": 8, "test_shots": 8, "o": 4, "d_in": 16,
    "spread": 0.05, "anchors_per_class": 1, "tokens_per_anchor": 2,
    "task_seed": 0,
    # model
    "m": 4, "n": 4, "b": 2, "d": 16,
    "lambda": 0.1, "beta": 1.0, "tau": 0.01, "cost_mode": "additive",
    "max_iter": 100, "tol": 1e-9,
    # optimization
    "lr": 0.0035, "epochs": 50, "batch_size": 4, "seed": 0,
}

_INT_KEYS = {"k", "shots", "test_shots", "o", "d_in", "anchors_per_class",
             "tokens_per_anchor", "task_seed", "m", "n", "b", "d",
             "max_iter", "epochs", "batch_size", "seed"}
_FLOAT_KEYS = {"spread", "lambda", "beta", "tau", "tol", "lr"}


def parse_run_config(path) -> Tuple[TaskSpec, TrainConfig]:
    """Read a 'key = value' config with '#' comments. Unknown keys are
    rejected; unset keys take the documented defaults."""
    values = dict(_CONFIG_DEFAULTS)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in values:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key in _INT_KEYS:
                    values[key] = int(val)
                elif key in _FLOAT_KEYS:
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {val!r}")

    if values["cost_mode"] not in COST_MODES:
        raise ValueError(f"{path}: cost_mode must be one of {COST_MODES}")
    task = TaskSpec(k=values["k"], shots=values["shots"], test_shots=values["test_shots"],
                    o=values["o"], d_in=values["d_in"], cluster_spread=values["spread"],
                    anchors_per_class=values["anchors_per_class"],
                    tokens_per_anchor=values["tokens_per_anchor"], seed=values["task_seed"])
    align = AlignConfig(beta=values["beta"], tau=values["tau"],
                        cost_mode=values["cost_mode"],
                        sinkhorn=SinkhornSettings(lam=values["lambda"],
                                                  max_iterations=values["max_iter"],
                                                  tolerance=values["tol"]))
    cfg = TrainConfig(learning_rate=values["lr"], epochs=values["epochs"],
                      batch_size=values["batch_size"], m=values["m"], n=values["n"],
                      b=values["b"], d=values["d"], align=align, seed=values["seed"])
    return task, cfg


# --- CSV helpers -------------------------------------------------------

def format_float(x: float) -> str:
    """Shortest exact decimal for a float64; locale-independent."""
    return repr(float(x))


def write_csv_matrix(path_or_handle, m: np.ndarray) -> None:
    rows = ["," .join(format_float(v) for v in row) for row in np.atleast_2d(m)]
    text = "\n".join(rows) + "\n"
    if hasattr(path_or_handle, "write"):
        path_or_handle.write(text)
    else:
        with open(path_or_handle, "w") as fh:
            fh.write(text)


def read_csv_matrix(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed CSV row")
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged CSV rows")
    return np.array(rows, dtype=np.float64)


def write_params_csv(path, params: PromptParams) -> None:
    """Prompt parameters as side,prompt,row,v0,...  (exact decimals)."""
    with open(path, "w") as fh:
        fh.write("side,prompt,row,values...\n")
        for side, mats in (("visual", params.visual), ("textual", params.textual)):
            for i, mat in enumerate(mats):
                for r, row in enumerate(mat):
                    vals = ",".join(format_float(v) for v in row)
                    fh.write(f"{side},{i},{r},{vals}\n")


def read_params_csv(path) -> PromptParams:
    visual = {}
    textual = {}
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("side,prompt,row"):
            raise ValueError(f"{path}: not a params file")
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            side, i, r = parts[0], int(parts[1]), int(parts[2])
            row = [float(v) for v in parts[3:]]
            target = visual if side == "visual" else textual
            target.setdefault(i, {})[r] = row

    def build(d):
        return [np.array([d[i][r] for r in sorted(d[i])]) for i in sorted(d)]

    return PromptParams(build(visual), build(textual))
