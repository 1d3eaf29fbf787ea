"""Desk-scale datasets and artifact persistence.

Datasets are batches of category-index sequences: a quantized 2-D swiss
roll (two positions sharing one grid resolution), fixed-length chunks of a
27-symbol character corpus ({a..z, space}), and uniform synthetic noise.
Checkpoints are single JSON documents with floats stored as IEEE-754 hex
strings for bit-exact round trips.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .exceptions import CheckpointError, DataError
from .process import SequenceBatch
from .schedule import Schedule
from .transition import TransitionSpec
from .util import canonical_json, config_hash, rng_from_seed, write_csv

CHAR_ALPHABET = "abcdefghijklmnopqrstuvwxyz "
SPACE_INDEX = 26
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    kind: str
    num_categories: int
    seq_len: int
    records: SequenceBatch
    vocab: dict | None = None
    seed: int | None = None

    @property
    def size(self) -> int:
        return self.records.batch_size


def gen_swiss_roll(n: int, grid: int = 32, noise: float = 0.5,
                   seed: int = 0) -> Dataset:
    """Quantized 2-D swiss roll: n points floored onto a grid x grid lattice.

    Points on the standard spiral (angle uniform over 1.5pi..4.5pi) get
    isotropic Gaussian jitter, then each axis is min-max scaled to
    [0, grid-1] and floored to integer cells. The curve parameter is drawn
    from the seeded stream, so the n = 1 output is seed-determined (and a
    degenerate single-point range maps to cell 0).
    """
    if n <= 0:
        raise DataError(f"need a positive sample count, got {n}")
    if grid < 4:
        raise DataError(f"grid must be at least 4, got {grid}")
    rng = rng_from_seed(seed)
    theta = 1.5 * np.pi * (1.0 + 2.0 * rng.random(n))
    points = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1)
    points += noise * rng.standard_normal(points.shape)
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    cells = np.floor((points - lo) / span * (grid - 1e-9)).astype(np.int64)
    cells = np.clip(cells, 0, grid - 1)
    return Dataset("swiss_roll", grid, 2, SequenceBatch(cells, grid), seed=seed)


def gen_synthetic(n: int, num_categories: int, seq_len: int,
                  seed: int = 0) -> Dataset:
    """Uniform random category indices; entropy exactly log2(K) bits/dim."""
    if n <= 0:
        raise DataError(f"need a positive sample count, got {n}")
    rng = rng_from_seed(seed)
    data = rng.integers(0, num_categories, size=(n, seq_len))
    return Dataset("synthetic", num_categories, seq_len,
                   SequenceBatch(data, num_categories), seed=seed)


def encode_chars(text: str) -> np.ndarray:
    """Lowercase, map a-z to 0-25 and space to 26, drop everything else."""
    table = {c: i for i, c in enumerate(CHAR_ALPHABET)}
    return np.array([table[c] for c in text.lower() if c in table],
                    dtype=np.int64)


def decode_chars(indices) -> str:
    return "".join(CHAR_ALPHABET[i] for i in np.asarray(indices).reshape(-1))


def load_char_corpus(path, chunk_len: int = 256,
                     num_categories: int = 27) -> Dataset:
    """Fixed-length rows from a text file over the 27-symbol alphabet.

    ``num_categories`` may exceed 27 to reserve extra model-side categories
    (e.g. an absorbing token) that never occur in the data.
    """
    if chunk_len < 1:
        raise DataError(f"chunk_len must be positive, got {chunk_len}")
    if num_categories < len(CHAR_ALPHABET):
        raise DataError(f"num_categories must be >= {len(CHAR_ALPHABET)}")
    with open(path, "r", errors="ignore") as fh:
        stream = encode_chars(fh.read())
    usable = (len(stream) // chunk_len) * chunk_len
    if usable == 0:
        raise DataError(f"no usable alphabet characters in {path!r} "
                        f"(need at least {chunk_len})")
    rows = stream[:usable].reshape(-1, chunk_len)
    vocab = {c: i for i, c in enumerate(CHAR_ALPHABET)}
    return Dataset("char_corpus", num_categories, chunk_len,
                   SequenceBatch(rows, num_categories), vocab=vocab)


def estimate_marginal(batch: SequenceBatch, num_categories: int | None = None):
    """Empirical token distribution with add-one smoothing over observed
    categories; unobserved categories keep exactly zero mass."""
    K = num_categories or batch.num_categories
    counts = np.bincount(batch.data.reshape(-1), minlength=K).astype(np.float64)
    observed = counts > 0
    counts[observed] += 1.0
    return counts / counts.sum()


def batch_to_csv(path, batch: SequenceBatch, meta: dict | None = None) -> None:
    """Batch rows as CSV with '#'-comment metadata (t, seed, hashes...)."""
    meta = dict(meta or {})
    meta.setdefault("K", batch.num_categories)
    meta.setdefault("D", batch.seq_len)
    columns = [f"x{d}" for d in range(batch.seq_len)]
    write_csv(path, batch.data.tolist(), columns, header_meta=meta)


def batch_from_csv(path) -> SequenceBatch:
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
            elif line and not line.startswith("x0"):
                rows.append([int(v) for v in line.split(",")])
    if "K" not in meta:
        raise DataError(f"batch file {path!r} is missing its K header")
    return SequenceBatch(np.array(rows, dtype=np.int64), int(meta["K"]))


# --- checkpoints ------------------------------------------------------------

def _floats_to_hex(arr):
    return [float(v).hex() for v in np.asarray(arr, dtype=np.float64).reshape(-1)]


def _hex_to_floats(values, shape):
    return np.array([float.fromhex(v) for v in values],
                    dtype=np.float64).reshape(shape)


def _checkpoint_payload(params, spec, sched, meta):
    return {
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_json_dict(),
        "schedule": sched.to_json_dict(),
        "params": {name: {"shape": list(np.shape(arr)),
                          "data": _floats_to_hex(arr)}
                   for name, arr in sorted(params.items())},
        "meta": meta,
    }


def save_checkpoint(path, params: dict, spec: TransitionSpec, schedule: Schedule,
                    *, seed: int, step: int, extra: dict | None = None) -> None:
    meta = {"seed": int(seed), "step": int(step)}
    meta.update(extra or {})
    payload = _checkpoint_payload(params, spec, schedule, meta)
    digest = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
    payload["checksum"] = digest
    with open(path, "w") as fh:
        fh.write(canonical_json(payload))


def load_checkpoint(path, expected_spec: TransitionSpec | None = None,
                    expected_schedule: Schedule | None = None):
    """Load (params, spec, schedule, meta); refuses corrupt or mismatched files."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"not a checkpoint file: {err}") from err
    stored = payload.pop("checksum", None)
    digest = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
    if stored != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or tampered")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    spec = TransitionSpec.from_json_dict(payload["spec"])
    sched = Schedule.from_json_dict(payload["schedule"])
    if expected_spec is not None and \
            config_hash(expected_spec.to_json_dict()) != config_hash(spec.to_json_dict()):
        raise CheckpointError("transition-spec hash mismatch: refusing cross-spec load")
    if expected_schedule is not None and \
            config_hash(expected_schedule.to_json_dict()) != config_hash(sched.to_json_dict()):
        raise CheckpointError("schedule hash mismatch: refusing cross-schedule load")
    params = {name: _hex_to_floats(entry["data"], entry["shape"])
              for name, entry in payload["params"].items()}
    return params, spec, sched, payload["meta"]
