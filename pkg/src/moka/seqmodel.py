"""Modality-segmented token sequences and routing masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError
from .numkernel import slice_rows


@dataclass(frozen=True)
class ModalityId:
    name: str
    index: int
    is_text: bool = False


@dataclass(frozen=True)
class ModalitySpan:
    modality: ModalityId
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def name(self) -> str:
        return self.modality.name


def make_modalities(names: Sequence[str], text: str = "text") -> list[ModalityId]:
    if text not in names:
        raise ContractError(f"text modality {text!r} missing from {list(names)}")
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate modality names in {list(names)}")
    return [ModalityId(n, i, n == text) for i, n in enumerate(names)]


def build_spans(modalities: Sequence[ModalityId], lengths: Sequence[int]) -> tuple[ModalitySpan, ...]:
    """Lay spans out back to back in the given order."""
    if len(modalities) != len(lengths):
        raise ContractError("one length per modality required")
    spans, start = [], 0
    for mod, n in zip(modalities, lengths):
        spans.append(ModalitySpan(mod, start, int(n)))
        start += int(n)
    return tuple(spans)


def validate_spans(spans: Sequence[ModalitySpan], total: int | None = None) -> None:
    """Spans must be ordered, contiguous, non-overlapping and cover [0, total)."""
    names = [s.name for s in spans]
    if len(set(names)) != len(names):
        raise ContractError(f"modality names not unique: {names}")
    if sum(s.modality.is_text for s in spans) > 1:
        raise ContractError("more than one text modality")
    cursor = 0
    for s in spans:
        if s.length < 0:
            raise ContractError(f"negative span length for {s.name}")
        if s.start != cursor:
            raise ContractError(f"span {s.name} starts at {s.start}, expected {cursor}")
        cursor = s.stop
    if total is not None and cursor != total:
        raise ContractError(f"spans cover {cursor} tokens but sequence has {total}")


@dataclass(frozen=True, eq=False)
class ModalitySegmentedSequence:
    """Token matrix ``(L, k)`` (or a batch ``(B, L, k)``) plus its modality spans.

    A batch shares one span layout; that is how the synthetic task and the
    trainer stack samples.
    """

    tokens: np.ndarray
    spans: tuple[ModalitySpan, ...]

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim not in (2, 3):
            raise ContractError(f"tokens must be (L, k) or (B, L, k), got {tokens.shape}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "spans", tuple(self.spans))
        validate_spans(self.spans, tokens.shape[-2])

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def modalities(self) -> list[ModalityId]:
        return [s.modality for s in self.spans]

    @property
    def text_span(self) -> ModalitySpan | None:
        return next((s for s in self.spans if s.modality.is_text), None)

    def span(self, modality: ModalityId | str) -> ModalitySpan:
        name = modality if isinstance(modality, str) else modality.name
        for s in self.spans:
            if s.name == name:
                return s
        raise KeyError(f"modality {name!r} not in sequence ({[s.name for s in self.spans]})")

    def sample(self, i: int) -> "ModalitySegmentedSequence":
        if self.tokens.ndim != 3:
            raise ContractError("sample() needs a batched sequence")
        return ModalitySegmentedSequence(self.tokens[i], self.spans)


def slice_modality(seq: ModalitySegmentedSequence, modality: ModalityId | str) -> np.ndarray:
    s = seq.span(modality)
    return slice_rows(seq.tokens, s.start, s.stop)


def slice_span(x, span: ModalitySpan):
    """Traced or eager row slice for one span."""
    return slice_rows(x, span.start, span.stop)


@dataclass(frozen=True)
class RoutingMask:
    """Which modalities' tokens enter the adapter pathway.

    The frozen path is never masked; only the adapter delta rows of routed-off
    spans are zeroed.
    """

    pass_through_adapter: Mapping[str, bool]

    def passes(self, modality: ModalityId | str) -> bool:
        name = modality if isinstance(modality, str) else modality.name
        try:
            return bool(self.pass_through_adapter[name])
        except KeyError:
            raise KeyError(f"routing mask has no entry for {name!r}") from None

    def is_full(self, spans: Iterable[ModalitySpan]) -> bool:
        return all(self.passes(s.modality) for s in spans)

    def row_mask(self, spans: Sequence[ModalitySpan], dtype=np.float64) -> np.ndarray:
        """``(L, 1)`` column of 1/0 selecting routed rows."""
        col = np.zeros((sum(s.length for s in spans), 1), dtype=dtype)
        for s in spans:
            if self.passes(s.modality):
                col[s.start:s.stop] = 1.0
        return col


def make_routing_mask(selected: Iterable[ModalityId | str], modalities: Sequence[ModalityId | str]) -> RoutingMask:
    names = [m if isinstance(m, str) else m.name for m in modalities]
    chosen = {m if isinstance(m, str) else m.name for m in selected}
    unknown = chosen - set(names)
    if unknown:
        raise ContractError(f"selected modalities not in sequence: {sorted(unknown)}")
    return RoutingMask({n: n in chosen for n in names})
