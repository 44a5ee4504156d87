"""Frozen toy host network with adapters attached to its linear maps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .adapters import Adapter, AdapterSpec, build_adapter, check_rank, flop_count
from .errors import ContractError, ShapeError
from .numkernel import (
    SILU_FLOPS,
    RngStream,
    Tape,
    Var,
    kaiming_uniform_init,
    matmul,
    mean_rows,
    resolve_dtype,
    silu,
    slice_rows,
    transpose,
)
from .seqmodel import ModalityId, ModalitySegmentedSequence, ModalitySpan, RoutingMask

POOLING = ("all", "text")


@dataclass(frozen=True)
class NetDims:
    k: int = 32
    d: int = 32
    depth: int = 2
    classes: int = 8
    attach: tuple[int, ...] | None = None  # block indices carrying an adapter; None = all
    pool: str = "all"

    def __post_init__(self):
        if min(self.k, self.d, self.depth, self.classes) < 1:
            raise ContractError(f"network dims must be positive: {self}")
        if self.pool not in POOLING:
            raise ContractError(f"pool must be one of {POOLING}")
        if self.attach is not None:
            object.__setattr__(self, "attach", tuple(int(i) for i in self.attach))
            bad = [i for i in self.attach if not 0 <= i < self.depth]
            if bad:
                raise ContractError(f"attach indices {bad} outside 0..{self.depth - 1}")

    def attached(self, i: int) -> bool:
        return self.attach is None or i in self.attach


class FrozenLinear:
    """``x -> x W0^T + b`` with parameters that never receive updates."""

    frozen = True

    def __init__(self, W0: np.ndarray, bias: np.ndarray | None = None):
        self.W0 = np.asarray(W0)
        self.bias = None if bias is None else np.asarray(bias).reshape(1, -1)

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def k(self) -> int:
        return self.W0.shape[1]

    def __call__(self, x: Var, prefix: str = "") -> Var:
        tape = x.tape
        h = matmul(x, transpose(tape.param(prefix + "W0", self.W0, trainable=False)))
        if self.bias is not None:
            h = h + tape.param(prefix + "b0", self.bias, trainable=False)
        return h


class AdaptedLinear:
    def __init__(self, frozen: FrozenLinear, adapter: Adapter | None, tag: str):
        self.frozen = frozen
        self.adapter = adapter
        self.tag = tag

    def __call__(self, x: Var, spans: Sequence[ModalitySpan], mask: RoutingMask | None = None,
                 records: list | None = None, probes: dict | None = None,
                 trainable: bool = True) -> Var:
        if probes is not None:
            probes.setdefault(self.tag, []).append(np.array(x.value))
        h = self.frozen(x, self.tag + ".")
        if self.adapter is None:
            return h
        return h + self.adapter.delta(x, spans, mask, records, trainable)


class ToyNetwork:
    """Stack of adapted linear maps with SiLU, mean pooling and a linear head.

    Only adapter and head parameters are trainable. The backbone is drawn from
    ``backbone_seed`` so every run over the same dims shares one frozen model.
    """

    def __init__(self, modalities: Sequence[ModalityId], dims: NetDims, adapter_spec: AdapterSpec | None,
                 seed: int = 0, backbone_seed: int = 0, dtype="f64"):
        self.modalities = list(modalities)
        self.dims = dims
        self.adapter_spec = adapter_spec
        self.dtype = resolve_dtype(dtype)
        if adapter_spec is not None:
            check_rank(adapter_spec.rank, dims.d, min(dims.k, dims.d))
        backbone = RngStream(backbone_seed, stream=0xB0)
        self.blocks: list[AdaptedLinear] = []
        for i in range(dims.depth):
            k_in = dims.k if i == 0 else dims.d
            gen = backbone.child(f"blocks.{i}").generator()
            W0 = gen.normal(0.0, 1.0 / np.sqrt(k_in), size=(dims.d, k_in)).astype(self.dtype)
            b0 = gen.normal(0.0, 0.1, size=(1, dims.d)).astype(self.dtype)
            tag = f"blocks.{i}"
            adapter = None
            if adapter_spec is not None and dims.attached(i):
                adapter = build_adapter(adapter_spec, self.modalities, dims.d, k_in, self.dtype,
                                        prefix=f"{tag}.adapter.")
            self.blocks.append(AdaptedLinear(FrozenLinear(W0, b0), adapter, tag))
        self.head_W = kaiming_uniform_init(dims.classes, dims.d, RngStream(seed).child("head.W"), self.dtype)
        self.head_b = np.zeros((1, dims.classes), dtype=self.dtype)

    @property
    def adapters(self) -> list[Adapter]:
        return [b.adapter for b in self.blocks if b.adapter is not None]

    # parameters

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for a in self.adapters:
            out.update(a.named_parameters())
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def frozen_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks:
            out[f"{b.tag}.W0"] = b.frozen.W0
            if b.frozen.bias is not None:
                out[f"{b.tag}.b0"] = b.frozen.bias
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.frozen_parameters(), **self.trainable_parameters()}

    def set_trainable(self, values: Mapping[str, np.ndarray]) -> None:
        for a in self.adapters:
            for name in a.params:
                full = a.prefix + name
                if full in values:
                    a.params[name] = np.asarray(values[full], dtype=self.dtype)
        if "head.W" in values:
            self.head_W = np.asarray(values["head.W"], dtype=self.dtype)
        if "head.b" in values:
            self.head_b = np.asarray(values["head.b"], dtype=self.dtype)

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(tensors))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing}")
        for name, arr in expected.items():
            if np.shape(tensors[name]) != arr.shape:
                raise ShapeError(f"{name}: expected {arr.shape}, got {np.shape(tensors[name])}")
        for b in self.blocks:
            b.frozen.W0 = np.asarray(tensors[f"{b.tag}.W0"], dtype=self.dtype)
            if b.frozen.bias is not None:
                b.frozen.bias = np.asarray(tensors[f"{b.tag}.b0"], dtype=self.dtype)
        self.set_trainable(tensors)

    def frozen_checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name, arr in sorted(self.frozen_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def zero_adapter_copy(self) -> "ToyNetwork":
        """Same network with every B (and hence every delta) zeroed."""
        clone = ToyNetwork.__new__(ToyNetwork)
        clone.__dict__.update(self.__dict__)
        clone.blocks = []
        for b in self.blocks:
            adapter = None
            if b.adapter is not None:
                adapter = type(b.adapter).__new__(type(b.adapter))
                adapter.__dict__.update(b.adapter.__dict__)
                adapter.params = {k: (np.zeros_like(v) if b.adapter.roles[k] == "B" else v)
                                  for k, v in b.adapter.params.items()}
            clone.blocks.append(AdaptedLinear(b.frozen, adapter, b.tag))
        return clone

    # forward

    def forward_tape(self, tape: Tape, tokens, spans: Sequence[ModalitySpan], mask: RoutingMask | None = None,
                     records: list | None = None, probes: dict | None = None) -> Var:
        x = tokens if isinstance(tokens, Var) else tape.const(tokens, name="tokens")
        if x.shape[-1] != self.dims.k:
            raise ShapeError(f"token width {x.shape[-1]} != network k={self.dims.k}")
        h = x
        for block in self.blocks:
            h = silu(block(h, spans, mask, records, probes))
        if self.dims.pool == "text":
            text = next((s for s in spans if s.modality.is_text), None)
            if text is None or text.length == 0:
                raise ContractError("text pooling needs a non-empty text span")
            h = slice_rows(h, text.start, text.stop)
        pooled = mean_rows(h)
        return matmul(pooled, transpose(tape.param("head.W", self.head_W))) + tape.param("head.b", self.head_b)

    def forward(self, seq: ModalitySegmentedSequence, mask: RoutingMask | None = None,
                records: list | None = None, probes: dict | None = None) -> np.ndarray:
        """Logits ``(C,)`` for one sequence or ``(B, C)`` for a batch."""
        tape = Tape(self.dtype, check_finite=False)
        logits = self.forward_tape(tape, seq.tokens, seq.spans, mask, records, probes).value
        return logits[..., 0, :]

    def predict(self, seq: ModalitySegmentedSequence, mask: RoutingMask | None = None) -> np.ndarray:
        return self.forward(seq, mask).argmax(axis=-1)

    # accounting

    def num_trainable(self) -> int:
        return sum(int(v.size) for v in self.trainable_parameters().values())

    def num_frozen(self) -> int:
        return sum(int(v.size) for v in self.frozen_parameters().values())

    def analytic_flops(self, spans: Sequence[ModalitySpan]) -> int:
        """Closed-form forward FLOPs for one sequence under full routing."""
        L = sum(s.length for s in spans)
        total = 0
        for block in self.blocks:
            d, k = block.frozen.d, block.frozen.k
            total += 2 * L * k * d
            if block.frozen.bias is not None:
                total += L * d
            if block.adapter is not None:
                total += flop_count(self.adapter_spec, d, k, spans, n=len(block.adapter.modalities)) + L * d
            total += SILU_FLOPS * L * d
        pooled_rows = L
        if self.dims.pool == "text":
            pooled_rows = next(s.length for s in spans if s.modality.is_text)
        total += pooled_rows * self.dims.d
        total += 2 * self.dims.d * self.dims.classes + self.dims.classes
        return total

    def instrumented_flops(self, seq: ModalitySegmentedSequence, mask: RoutingMask | None = None) -> int:
        tape = Tape(self.dtype, check_finite=False)
        self.forward_tape(tape, seq.tokens, seq.spans, mask)
        return tape.flop_count()
