"""Binary routing genotypes and their decoding into module-weight plans.

A genotype is a flat bit sequence that encodes, for a network of n_m
modules, one quantized weight per incoming connection: module i mixes the
embedding output and the outputs of modules 1..i-1, so it needs i weights
and the whole genotype packs n_m * (n_m + 1) / 2 of them at p_w bits each.
Decoding reads each p_w-bit group MSB-first into an integer in
[0, 2^p_w - 1] and normalizes each row with either the shifted-exponential
map ("halfsoftmax", the default) or a plain softmax (ablation baseline).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MAX_PRECISION = 8  # e^(2^8 - 1) is the largest exponential float64 can hold
HALF_SOFTMAX_SHIFT = 0.99  # fixed constant of the shifted-exponential map

DECODE_MODES = ("halfsoftmax", "softmax")


class GenotypeError(ValueError):
    """Structurally invalid genotype or decode input."""


def genotype_length(p_w: int, n_m: int) -> int:
    """Total bit count for precision p_w and module count n_m."""
    if p_w < 1 or n_m < 1:
        raise GenotypeError(f"precision and stage must be >= 1, got p_w={p_w}, n_m={n_m}")
    if p_w > MAX_PRECISION:
        raise GenotypeError(
            f"precision {p_w} exceeds {MAX_PRECISION}; exp(2^p_w - 1) would overflow float64"
        )
    return p_w * n_m * (n_m + 1) // 2


@dataclass(frozen=True)
class GenotypePolicy:
    """One binary routing policy plus its fitness bookkeeping.

    bits are MSB-first within each p_w-bit weight group. fitness is the
    running mean of recorded episode returns; it is None exactly while
    eval_count == 0.
    """

    bits: tuple[int, ...]
    precision: int
    stage: int
    fitness: float | None = None
    eval_count: int = 0

    def __post_init__(self):
        expected = genotype_length(self.precision, self.stage)
        if len(self.bits) != expected:
            raise GenotypeError(
                f"genotype has {len(self.bits)} bits, stage {self.stage} at "
                f"precision {self.precision} requires {expected}"
            )
        if any(b not in (0, 1) for b in self.bits):
            raise GenotypeError("genotype bits must all be 0 or 1")
        if (self.eval_count == 0) != (self.fitness is None):
            raise GenotypeError("fitness must be absent exactly while eval_count == 0")
        if self.eval_count < 0:
            raise GenotypeError("eval_count must be non-negative")

    @property
    def length(self) -> int:
        return len(self.bits)

    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass(frozen=True)
class DecodedSegments:
    """Per-row integer weight codes; row i holds i values in [0, 2^p_w - 1]."""

    rows: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class WeightPlan:
    """Decoded lower-triangular mixing weights; row i has i entries."""

    rows: tuple[np.ndarray, ...]

    @property
    def stage(self) -> int:
        return len(self.rows)

    def validate(self, atol: float = 1e-12) -> None:
        for i, row in enumerate(self.rows, start=1):
            if row.shape != (i,):
                raise GenotypeError(f"plan row {i} has shape {row.shape}, expected ({i},)")
            if (row < 0.0).any():
                raise GenotypeError(f"plan row {i} has negative weights")
            if abs(float(row.sum()) - 1.0) > atol:
                raise GenotypeError(f"plan row {i} sums to {row.sum()!r}, expected 1")


def random_genotype(p_w: int, n_m: int, rng: np.random.Generator) -> GenotypePolicy:
    """Fresh genotype with iid uniform bits and no fitness."""
    length = genotype_length(p_w, n_m)
    bits = tuple(int(b) for b in rng.integers(0, 2, size=length))
    return GenotypePolicy(bits=bits, precision=p_w, stage=n_m)


def decode_segments(g: GenotypePolicy) -> DecodedSegments:
    """Partition the bit sequence into per-row integer codes, MSB-first."""
    powers = [1 << (g.precision - 1 - k) for k in range(g.precision)]
    rows = []
    pos = 0
    for i in range(1, g.stage + 1):
        row = []
        for _ in range(i):
            group = g.bits[pos : pos + g.precision]
            row.append(sum(p * b for p, b in zip(powers, group)))
            pos += g.precision
        rows.append(tuple(row))
    return DecodedSegments(rows=tuple(rows))


def half_softmax(d) -> np.ndarray:
    """Shifted-exponential normalization: (e^d - 0.99) / sum(e^d - 0.99).

    A zero code maps to a near-zero weight (0.01 / denominator), which is
    what lets a decoded plan effectively skip a module. Computed directly
    in float64; the precision cap keeps exp() finite, and the usual
    max-subtraction trick would not commute with the shift.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise GenotypeError("half_softmax expects a non-empty 1-d vector")
    shifted = np.exp(d) - HALF_SOFTMAX_SHIFT
    return shifted / shifted.sum()


def softmax_baseline(d) -> np.ndarray:
    """Plain exponential normalization of the integer codes (ablation)."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise GenotypeError("softmax expects a non-empty 1-d vector")
    e = np.exp(d)
    return e / e.sum()


def decode_to_weights(g: GenotypePolicy, mode: str = "halfsoftmax") -> WeightPlan:
    """Decode a genotype into its module-weight plan."""
    if mode not in DECODE_MODES:
        raise GenotypeError(f"unknown decode mode {mode!r}; expected one of {DECODE_MODES}")
    normalize = half_softmax if mode == "halfsoftmax" else softmax_baseline
    segments = decode_segments(g)
    rows = tuple(normalize(np.asarray(row, dtype=np.float64)) for row in segments.rows)
    return WeightPlan(rows=rows)


def with_recorded_reward(g: GenotypePolicy, reward: float) -> GenotypePolicy:
    """Genotype with one more evaluation folded into its running-mean fitness."""
    if not np.isfinite(reward):
        raise GenotypeError(f"non-finite reward {reward!r}")
    if g.eval_count == 0:
        return replace(g, fitness=float(reward), eval_count=1)
    total = g.fitness * g.eval_count + float(reward)
    return replace(g, fitness=total / (g.eval_count + 1), eval_count=g.eval_count + 1)


# --- CSV serialization (one genotype per line) ------------------------------
#
# Line format: task_id,stage,p_w,bitstring,fitness,eval_count
# fitness is empty while absent; bitstring is the raw 0/1 characters in
# storage order.


def to_csv_line(task_id: int, g: GenotypePolicy) -> str:
    fitness = "" if g.fitness is None else repr(g.fitness)
    return f"{task_id},{g.stage},{g.precision},{g.bitstring()},{fitness},{g.eval_count}"


def from_csv_line(line: str) -> tuple[int, GenotypePolicy]:
    parts = line.strip().split(",")
    if len(parts) != 6:
        raise GenotypeError(f"expected 6 CSV fields, got {len(parts)}: {line!r}")
    task_id, stage, p_w, bitstring, fitness, eval_count = parts
    if set(bitstring) - {"0", "1"}:
        raise GenotypeError(f"bitstring contains non-binary characters: {bitstring!r}")
    g = GenotypePolicy(
        bits=tuple(1 if c == "1" else 0 for c in bitstring),
        precision=int(p_w),
        stage=int(stage),
        fitness=None if fitness == "" else float(fitness),
        eval_count=int(eval_count),
    )
    return int(task_id), g
