"""Triplet construction with the negative pinned to the seafloor class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .dataset import SEAFLOOR


class SamplerError(ValueError):
    pass


class NoPositiveAvailable(SamplerError):
    pass


class NoNegativeAvailable(SamplerError):
    pass


@dataclass
class TripletBatch:
    anchors: list[str]
    positives: list[str]
    negatives: list[str]
    anchor_labels: list[int]

    def __len__(self) -> int:
        return len(self.anchors)


class TripletSampler:
    """Draws (anchor, positive, negative) ids from a labelled training split.

    ``labels`` maps sample id to class id. Seafloor samples only ever serve as
    negatives; they never anchor a triplet.
    """

    def __init__(self, labels: Mapping[str, int]):
        self.labels = dict(labels)
        self.by_class: dict[int, list[str]] = {}
        for sid in sorted(self.labels):
            self.by_class.setdefault(self.labels[sid], []).append(sid)
        self._pos = {sid: k for ids in self.by_class.values() for k, sid in enumerate(ids)}
        self.negatives = self.by_class.get(SEAFLOOR, [])
        self.anchor_pool = sorted(sid for sid, y in self.labels.items() if y != SEAFLOOR)

    def sample_triplet(self, anchor_id: str, rng: np.random.Generator) -> tuple[str, str, str]:
        label = self.labels[anchor_id]
        if label == SEAFLOOR:
            raise SamplerError(f"{anchor_id} is a seafloor sample and cannot anchor a triplet")
        same = self.by_class[label]
        if len(same) < 2:
            raise NoPositiveAvailable(f"class of {anchor_id} has no other training sample")
        if not self.negatives:
            raise NoNegativeAvailable("training split contains no seafloor samples")
        j = int(rng.integers(len(same) - 1))
        # skip the anchor's own slot
        if j >= self._pos[anchor_id]:
            j += 1
        positive = same[j]
        negative = self.negatives[int(rng.integers(len(self.negatives)))]
        return anchor_id, positive, negative

    def triplet_epoch(self, batch_size: int, rng: np.random.Generator) -> Iterator[TripletBatch]:
        """Every object-class sample anchors exactly once, in shuffled order."""
        if batch_size < 1:
            raise SamplerError("batch_size must be >= 1")
        order = [self.anchor_pool[k] for k in rng.permutation(len(self.anchor_pool))]
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            trip = [self.sample_triplet(a, rng) for a in chunk]
            yield TripletBatch(
                anchors=[t[0] for t in trip],
                positives=[t[1] for t in trip],
                negatives=[t[2] for t in trip],
                anchor_labels=[self.labels[a] for a in chunk],
            )

    def stream(self, batch_size: int, rng: np.random.Generator) -> Iterator[TripletBatch]:
        """Endless concatenation of triplet epochs."""
        while True:
            yield from self.triplet_epoch(batch_size, rng)


def sampler_from(ids: Sequence[str], labels: Sequence[int]) -> TripletSampler:
    return TripletSampler(dict(zip(ids, labels)))
