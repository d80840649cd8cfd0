"""Seeded synthesis of problem instances: Gaussian dictionaries (optionally
condition-shaped), Bernoulli-Gaussian signals, and SNR-controlled noise.

Randomness uses the counter-based Philox generator with per-role seed-sequence
spawn keys, so the dictionary stream is independent of the signal and noise
streams and adding samples never perturbs A. Sample streams carry an extra
substream tag (TEST/TRAIN/VAL) so training and validation data are disjoint
from the fixed test set while sharing the same dictionary.

Instance containers: ``<stem>.bin`` holds, in order, a 4-byte magic ``NLRG``,
a uint32 version, uint64 (m, n, batch), then A, X*, Eps, Y as little-endian
float64 in column-major order. ``<stem>.json`` is the human-readable sidecar
(dims, seed, function id, snr, condition target, per-sample stats).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .core import NonlinearScalarFunction, ProblemInstance

ROLE_DICTIONARY = 0
ROLE_SIGNAL = 1
ROLE_NOISE = 2

STREAM_TEST = 0
STREAM_TRAIN = 1
STREAM_VAL = 2

_MAGIC = b"NLRG"
_VERSION = 1


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator on the (seed, key...) spawn path; independent per key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class GenerationConfig:
    """Synthesis parameters for one experiment setting."""

    m: int = 250
    n: int = 500
    nonzero_prob: float = 0.1
    snr_db: Optional[float] = None
    cond_number: Optional[float] = None
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")
        if self.m >= self.n:
            raise ValueError(f"need m < n (underdetermined), got m={self.m}, n={self.n}")
        if not 0.0 <= self.nonzero_prob <= 1.0:
            raise ValueError("nonzero_prob must lie in [0, 1]")
        if self.cond_number is not None and self.cond_number < 1.0:
            raise ValueError(f"cond_number must be >= 1, got {self.cond_number}")
        if self.batch < 1:
            raise ValueError("batch must be positive")


def _prenorm_dictionary(config: GenerationConfig, attempt: int = 0) -> np.ndarray:
    """Gaussian N(0, 1/m) matrix, with singular values replaced by a geometric
    ramp sigma_max .. sigma_max/cond when condition shaping is requested."""
    rng = stream_rng(config.seed, ROLE_DICTIONARY, attempt)
    A0 = rng.normal(0.0, 1.0 / np.sqrt(config.m), size=(config.m, config.n))
    if config.cond_number is not None:
        U, S, Vt = np.linalg.svd(A0, full_matrices=False)
        S_new = np.geomspace(S[0], S[0] / config.cond_number, num=len(S))
        A0 = (U * S_new) @ Vt
    return A0


def generate_dictionary(config: GenerationConfig, return_prenorm: bool = False):
    """Column-normalized dictionary; regenerates on the (measure-zero) event of
    a degenerate column or a unit off-diagonal Gram entry."""
    for attempt in range(16):
        A0 = _prenorm_dictionary(config, attempt)
        norms = np.linalg.norm(A0, axis=0)
        if np.any(norms == 0.0):
            continue
        A = A0 / norms
        G = np.abs(A.T @ A)
        np.fill_diagonal(G, 0.0)
        if G.max() < 1.0:
            return (A, A0) if return_prenorm else A
    raise RuntimeError("failed to generate an admissible dictionary in 16 attempts")


def generate_signal(config: GenerationConfig, sample_index: int = 0,
                    substream: int = STREAM_TEST,
                    exact_support_size: Optional[int] = None) -> np.ndarray:
    """Bernoulli(nonzero_prob) support with standard-Gaussian nonzero values.

    ``exact_support_size`` replaces the Bernoulli draw with a uniformly random
    support of exactly that size (used by the certification CLI).
    """
    rng = stream_rng(config.seed, ROLE_SIGNAL, substream, sample_index)
    values = rng.standard_normal(config.n)
    if exact_support_size is None:
        mask = rng.random(config.n) < config.nonzero_prob
    else:
        if not 0 <= exact_support_size <= config.n:
            raise ValueError("exact_support_size out of range")
        mask = np.zeros(config.n, dtype=bool)
        mask[rng.permutation(config.n)[:exact_support_size]] = True
    return values * mask


def generate_noise(clean: np.ndarray, snr_db: Optional[float],
                   rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with variance ||clean||^2 / (m * 10^(snr/10)).

    snr_db None means noiseless (zeros); the empirical SNR of a batch then
    concentrates at snr_db.
    """
    clean = np.asarray(clean, dtype=float)
    if snr_db is None:
        return np.zeros_like(clean)
    m = clean.shape[0]
    var = float(clean @ clean) / (m * 10.0 ** (snr_db / 10.0))
    return rng.standard_normal(m) * np.sqrt(var)


def generate_instance(config: GenerationConfig, f: NonlinearScalarFunction,
                      sample_index: int = 0, A: Optional[np.ndarray] = None,
                      substream: int = STREAM_TEST,
                      exact_support_size: Optional[int] = None,
                      dict_meta: Optional[dict] = None) -> ProblemInstance:
    """Compose dictionary, signal and noise into y = f(A x*) + eps."""
    if A is None:
        A, A0 = generate_dictionary(config, return_prenorm=True)
        dict_meta = _dictionary_meta(config, A, A0)
    x_star = generate_signal(config, sample_index, substream, exact_support_size)
    clean = f.value(A @ x_star)
    rng = stream_rng(config.seed, ROLE_NOISE, substream, sample_index)
    eps = generate_noise(clean, config.snr_db, rng)
    meta = {
        "f_id": f.id,
        "sample_index": int(sample_index),
        "substream": int(substream),
        "support_size": int(np.count_nonzero(x_star)),
        "x_inf": float(np.max(np.abs(x_star))) if x_star.size else 0.0,
        "eps_l1": float(np.abs(eps).sum()),
    }
    if dict_meta:
        meta.update(dict_meta)
    return ProblemInstance(A=A, x_star=x_star, epsilon=eps, y=clean + eps,
                           seed=config.seed, snr_db=config.snr_db,
                           cond_target=config.cond_number, meta=meta)


def _dictionary_meta(config: GenerationConfig, A: np.ndarray, A0: np.ndarray) -> dict:
    if config.cond_number is None:
        return {}
    # target holds pre-normalization; the normalized matrix drifts from it
    return {"cond_pre": float(np.linalg.cond(A0)), "cond_post": float(np.linalg.cond(A))}


def generate_batch(config: GenerationConfig, f: NonlinearScalarFunction,
                   substream: int = STREAM_TEST) -> list[ProblemInstance]:
    """``config.batch`` instances sharing one dictionary object."""
    A, A0 = generate_dictionary(config, return_prenorm=True)
    dmeta = _dictionary_meta(config, A, A0)
    return [generate_instance(config, f, k, A=A, substream=substream, dict_meta=dmeta)
            for k in range(config.batch)]


def generate_signal_block(config: GenerationConfig, count: int, *key: int) -> np.ndarray:
    """(n, count) matrix of signals from one block stream (training batches)."""
    rng = stream_rng(config.seed, ROLE_SIGNAL, *key)
    values = rng.standard_normal((config.n, count))
    mask = rng.random((config.n, count)) < config.nonzero_prob
    return values * mask


def generate_noise_block(config: GenerationConfig, clean: np.ndarray, *key: int) -> np.ndarray:
    """Per-column noise for a (m, count) block of clean measurements."""
    if config.snr_db is None:
        return np.zeros_like(clean)
    rng = stream_rng(config.seed, ROLE_NOISE, *key)
    m = clean.shape[0]
    var = np.sum(clean * clean, axis=0) / (m * 10.0 ** (config.snr_db / 10.0))
    return rng.standard_normal(clean.shape) * np.sqrt(var)


def save_instances(stem, instances: list[ProblemInstance], extra_meta: Optional[dict] = None) -> None:
    """Write a shared-dictionary instance batch as <stem>.bin + <stem>.json."""
    if not instances:
        raise ValueError("no instances to save")
    A = instances[0].A
    for inst in instances[1:]:
        if inst.A is not A and not np.array_equal(inst.A, A):
            raise ValueError("instances in one container must share the dictionary")
    stem = Path(stem)
    m, n = A.shape
    batch = len(instances)
    X = np.stack([inst.x_star for inst in instances], axis=1)
    E = np.stack([inst.epsilon for inst in instances], axis=1)
    Y = np.stack([inst.y for inst in instances], axis=1)
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQQ", m, n, batch))
        for arr in (A, X, E, Y):
            fh.write(np.asfortranarray(arr, dtype="<f8").tobytes(order="F"))
    first = instances[0]
    meta = {
        "format": "NLRG v1: magic, u32 version, u64 m/n/batch, then A, X*, Eps, Y "
                  "as little-endian float64, column-major",
        "m": m, "n": n, "batch": batch,
        "seed": first.seed,
        "f_id": first.meta.get("f_id"),
        "snr_db": first.snr_db,
        "cond_target": first.cond_target,
        "samples": [inst.meta for inst in instances],
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instances(stem) -> list[ProblemInstance]:
    """Read back a container written by save_instances."""
    stem = Path(stem)
    bin_path = stem.with_suffix(".bin")
    if not bin_path.exists():
        raise FileNotFoundError(f"instance container not found: {bin_path}")
    with open(bin_path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{bin_path}: not an NLRG container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{bin_path}: unsupported container version {version}")
        m, n, batch = struct.unpack("<QQQ", fh.read(24))

        def read_mat(rows, cols):
            buf = fh.read(rows * cols * 8)
            return np.frombuffer(buf, dtype="<f8").reshape((rows, cols), order="F").copy()

        A = read_mat(m, n)
        X = read_mat(n, batch)
        E = read_mat(m, batch)
        Y = read_mat(m, batch)
    with open(stem.with_suffix(".json")) as fh:
        meta = json.load(fh)
    samples = meta.get("samples") or [{} for _ in range(batch)]
    out = []
    for k in range(batch):
        out.append(ProblemInstance(
            A=A, x_star=X[:, k], epsilon=E[:, k], y=Y[:, k],
            seed=meta.get("seed", 0), snr_db=meta.get("snr_db"),
            cond_target=meta.get("cond_target"), meta=dict(samples[k])))
    return out


def config_to_dict(config: GenerationConfig) -> dict:
    return asdict(config)
