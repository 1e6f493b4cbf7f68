"""Pulse-sequence level input dropout.

A censored sequence has its whole 5-slice channel block replaced by zeros and
the surviving blocks are multiplied by ``S / (S - c)`` (4/3 with one of four
sequences missing, 2 with two missing) so the summed input intensity stays
roughly where the network saw it during training.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import AllCensored, EmptyStudy, ShapeMismatch
from .volgrid import ALL_SEQUENCES, SLAB_DEPTH, MultiSequenceStudy, SequenceId

N_SEQUENCES = len(ALL_SEQUENCES)


@dataclass(frozen=True)
class CensorMask:
    """Per-sequence censoring flags in canonical sequence order."""

    censored: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def __post_init__(self):
        flags = tuple(bool(f) for f in self.censored)
        if len(flags) != N_SEQUENCES:
            raise ValueError(f"need {N_SEQUENCES} flags, got {len(flags)}")
        object.__setattr__(self, "censored", flags)

    @classmethod
    def of(cls, sequences: Iterable[SequenceId]) -> "CensorMask":
        drop = {SequenceId(s) for s in sequences}
        return cls(tuple(s in drop for s in ALL_SEQUENCES))

    @classmethod
    def parse(cls, text: str) -> "CensorMask":
        """Inverse of :meth:`to_string`: ``"1101"`` censors PostGdIR."""
        if len(text) != N_SEQUENCES or set(text) - {"0", "1"}:
            raise ValueError(f"mask string must be {N_SEQUENCES} chars of 0/1, got {text!r}")
        return cls(tuple(ch == "0" for ch in text))

    def to_string(self) -> str:
        return "".join("0" if c else "1" for c in self.censored)

    @property
    def n_censored(self) -> int:
        return sum(self.censored)

    @property
    def survivors(self) -> tuple[SequenceId, ...]:
        return tuple(s for s in ALL_SEQUENCES if not self.censored[s])

    def __str__(self):
        return self.to_string()


def all_masks() -> list[CensorMask]:
    """The 15 masks leaving at least one sequence, in a fixed order."""
    masks = [CensorMask(flags) for flags in itertools.product((False, True), repeat=N_SEQUENCES)]
    return [m for m in masks if m.n_censored < N_SEQUENCES]


@dataclass(frozen=True)
class DropoutPolicy:
    masks: tuple[CensorMask, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.masks) != len(self.probs) or not self.masks:
            raise ValueError("masks and probabilities must be non-empty and aligned")
        p = np.asarray(self.probs, dtype=np.float64)
        if (p < 0).any() or not np.isclose(p.sum(), 1.0, atol=1e-9):
            raise ValueError("policy probabilities must be non-negative and sum to 1")
        for m, pi in zip(self.masks, p):
            if m.n_censored >= N_SEQUENCES and pi > 0:
                raise AllCensored("policy gives weight to the all-censored mask")

    @classmethod
    def uniform(cls) -> "DropoutPolicy":
        masks = tuple(all_masks())
        return cls(masks, tuple(1.0 / len(masks) for _ in masks))

    @classmethod
    def point(cls, mask: CensorMask) -> "DropoutPolicy":
        return cls((mask,), (1.0,))

    @classmethod
    def from_weights(cls, weights: Mapping[str, float]) -> "DropoutPolicy":
        """Build from ``{"1101": w, ...}``; weights are normalised."""
        total = float(sum(weights.values()))
        if total <= 0:
            raise ValueError("policy weights must have a positive sum")
        items = sorted(weights.items())
        return cls(
            tuple(CensorMask.parse(k) for k, _ in items),
            tuple(float(w) / total for _, w in items),
        )


def rescale_factor(n_sequences: int, n_censored: int) -> float:
    if not 0 <= n_censored <= n_sequences:
        raise ValueError(f"censored count {n_censored} outside [0, {n_sequences}]")
    if n_censored == n_sequences:
        raise AllCensored("every sequence is censored")
    return n_sequences / (n_sequences - n_censored)


def censor(x: np.ndarray, mask: CensorMask) -> np.ndarray:
    """Zero the censored sequence blocks of an (H, W, 5*S) input and rescale the rest."""
    if x.ndim != 3 or x.shape[2] != SLAB_DEPTH * N_SEQUENCES:
        raise ShapeMismatch(f"expected (H, W, {SLAB_DEPTH * N_SEQUENCES}) input, got {x.shape}")
    factor = rescale_factor(N_SEQUENCES, mask.n_censored)
    if mask.n_censored == 0:
        return x.copy()
    out = x * x.dtype.type(factor)
    for s in ALL_SEQUENCES:
        if mask.censored[s]:
            out[:, :, SLAB_DEPTH * s : SLAB_DEPTH * (s + 1)] = 0
    return out


def sample_mask(rng: np.random.Generator, policy: DropoutPolicy) -> CensorMask:
    if len(policy.masks) == 1:
        return policy.masks[0]
    return policy.masks[rng.choice(len(policy.masks), p=policy.probs)]


def inference_mask(study: MultiSequenceStudy) -> CensorMask:
    """Censor exactly the sequences the study does not have."""
    if not study.volumes:
        raise EmptyStudy(study.case_id)
    return CensorMask.of(s for s in ALL_SEQUENCES if s not in study.volumes)
