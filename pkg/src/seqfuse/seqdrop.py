"""Sequence-level dropout (training) and missing-sequence reweighting (inference).

A whole sequence is dropped or kept: all of its slices zero out together.
Surviving channels are upweighted by n_seq / n_present, i.e. 1/(1-p) with p
the actually dropped fraction, and the same rule applies at inference when
sequences are missing from the input.
"""

from dataclasses import dataclass, replace

import numpy as np


class PresenceError(Exception):
    """Contract violation: an all-absent presence mask."""


@dataclass(frozen=True)
class SequencePresence:
    """Per-sample availability of each sequence, in canonical order."""

    present: tuple

    def __post_init__(self):
        object.__setattr__(self, "present", tuple(bool(p) for p in self.present))
        if not any(self.present):
            raise PresenceError("at least one sequence must be present")

    @property
    def n_seq(self):
        return len(self.present)

    @property
    def n_present(self):
        return sum(self.present)

    @property
    def scale(self):
        """1/(1-p) with p the dropped fraction; equals n_seq / n_present."""
        return self.n_seq / self.n_present

    @classmethod
    def all_present(cls, n_seq):
        return cls(present=(True,) * n_seq)


@dataclass(frozen=True)
class DropPolicy:
    p_drop: float = 0.25
    never_all: bool = True
    reweight: str = "train_time_upweight"

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0,1), got {self.p_drop}")
        if not self.never_all:
            raise ValueError("never_all must stay true: an all-zero input is untrainable")
        if self.reweight != "train_time_upweight":
            raise ValueError(f"unknown reweight mode {self.reweight!r}")


def draw_drop_mask(policy: DropPolicy, n_seq: int, rng) -> SequencePresence:
    """Drop each sequence independently with p_drop; an all-dropped draw is
    replaced by the all-present mask (its probability mass moves to 0-dropped)."""
    if n_seq < 1:
        raise ValueError("n_seq must be >= 1")
    dropped = rng.random(n_seq) < policy.p_drop
    if dropped.all():
        dropped[:] = False
    return SequencePresence(present=tuple(~dropped))


def draw_drop_masks(policy: DropPolicy, n_seq: int, rng, n: int) -> np.ndarray:
    """Vectorized twin of draw_drop_mask: (n, n_seq) boolean present matrix.

    Consumes the random stream exactly as n sequential draw_drop_mask calls."""
    dropped = rng.random((n, n_seq)) < policy.p_drop
    all_dropped = dropped.all(axis=1)
    dropped[all_dropped] = False
    return ~dropped


def apply_presence(sample, presence: SequencePresence):
    """Zero all slices of absent sequences and upweight the survivors once.

    Returns a new sample; the input is not mutated.  Re-applying the same
    presence to an already-scaled sample is a no-op; a different presence on
    a scaled sample is refused so the upweight can never compound."""
    n_seq = len(sample.sequence_names)
    if presence.n_seq != n_seq:
        raise ValueError(f"presence length {presence.n_seq} != sample sequences {n_seq}")
    if sample.scale_applied:
        if presence.present == sample.presence.present:
            return sample
        raise PresenceError("sample already scaled under a different presence mask")

    stack = sample.stack.copy()
    ns = sample.n_slices
    for i, keep in enumerate(presence.present):
        if keep:
            stack[i * ns:(i + 1) * ns] *= presence.scale
        else:
            stack[i * ns:(i + 1) * ns] = 0.0
    return replace(sample, stack=stack, presence=presence, scale_applied=True)


def presence_for_inference(available, canonical) -> SequencePresence:
    """Presence mask for inference on a subset of the canonical sequences."""
    available = set(available)
    if not available:
        raise ValueError("no sequences available for inference")
    unknown = available - set(canonical)
    if unknown:
        raise ValueError(f"unknown sequence names {sorted(unknown)}; canonical is {list(canonical)}")
    return SequencePresence(present=tuple(name in available for name in canonical))
