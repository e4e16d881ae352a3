"""Minimal transformer core: ReLU attention with residual stream, slot layouts,
norm accounting, and composition of independently built parts.

The forward pass treats the token matrix H (D x T) as a residual stream.
Attention adds (1/T) * sum_j sum_m relu(<Q_m h_i, K_m h_j>) V_m h_j to token i,
the MLP adds W2 relu(W1 h_i).  All weights are plain dense matrices so that
constructions can be audited entry by entry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    pass


class ForwardError(RuntimeError):
    pass


@dataclass(frozen=True)
class SlotLayout:
    """Named, disjoint, contiguous row ranges covering [0, dim)."""

    ranges: tuple[tuple[str, int, int], ...]

    @classmethod
    def build(cls, slots: list[tuple[str, int]]) -> "SlotLayout":
        ranges = []
        start = 0
        seen = set()
        for name, width in slots:
            if width < 0:
                raise LayoutError(f"slot {name!r} has negative width {width}")
            if name in seen:
                raise LayoutError(f"duplicate slot name {name!r}")
            seen.add(name)
            ranges.append((name, start, start + width))
            start += width
        return cls(tuple(ranges))

    @property
    def dim(self) -> int:
        return self.ranges[-1][2] if self.ranges else 0

    @property
    def names(self) -> list[str]:
        return [r[0] for r in self.ranges]

    def rows(self, name: str) -> slice:
        for n, a, b in self.ranges:
            if n == name:
                return slice(a, b)
        raise LayoutError(f"no slot named {name!r}")

    def start(self, name: str) -> int:
        return self.rows(name).start

    def width(self, name: str) -> int:
        s = self.rows(name)
        return s.stop - s.start

    def row(self, name: str) -> int:
        s = self.rows(name)
        if s.stop - s.start != 1:
            raise LayoutError(f"slot {name!r} has width {s.stop - s.start}, expected 1")
        return s.start

    def has(self, name: str) -> bool:
        return any(n == name for n, _, _ in self.ranges)


@dataclass
class TokenMatrix:
    """Token embedding matrix of shape (layout.dim, n + n_target + 1).

    Columns 0..n-1 are source tokens, n..n+n_target-1 target tokens, and the
    last column is the query.
    """

    data: np.ndarray
    layout: SlotLayout
    n_source: int
    n_target: int

    def __post_init__(self):
        if self.data.shape[0] != self.layout.dim:
            raise LayoutError(
                f"data has {self.data.shape[0]} rows, layout dim is {self.layout.dim}"
            )

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def query_index(self) -> int:
        return self.tokens - 1

    def slot(self, name: str) -> np.ndarray:
        return self.data[self.layout.rows(name)]

    def copy(self) -> "TokenMatrix":
        return TokenMatrix(self.data.copy(), self.layout, self.n_source, self.n_target)


@dataclass
class AttentionHead:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray


@dataclass
class TransformerLayer:
    heads: list[AttentionHead]
    W1: np.ndarray
    W2: np.ndarray


@dataclass
class Transformer:
    layers: list[TransformerLayer]
    layout: SlotLayout
    readout: tuple[str, int | None] = ("y", None)


def zero_layer(dim: int) -> TransformerLayer:
    """Layer with no heads and an empty MLP; forward is the identity."""
    return TransformerLayer([], np.zeros((0, dim)), np.zeros((dim, 0)))


def attn_forward(layer: TransformerLayer, tm: TokenMatrix) -> TokenMatrix:
    """Apply the attention half of a layer.

    out_i = h_i + (1/T) sum_j sum_m relu(<Q_m h_i, K_m h_j>) V_m h_j
    """
    H = tm.data
    D, T = H.shape
    acc = H.copy()
    for m, head in enumerate(layer.heads):
        if (head.Q.shape[1] != D or head.K.shape[1] != D
                or head.Q.shape[0] != head.K.shape[0] or head.V.shape != (D, D)):
            raise ForwardError(f"head {m}: weight shape does not match stream dim {D}")
        scores = (head.Q @ H).T @ (head.K @ H)
        np.maximum(scores, 0.0, out=scores)
        acc += (head.V @ H) @ scores.T / T
    if not np.all(np.isfinite(acc)):
        raise ForwardError("non-finite value in attention output")
    return TokenMatrix(acc, tm.layout, tm.n_source, tm.n_target)


def mlp_forward(layer: TransformerLayer, tm: TokenMatrix) -> TokenMatrix:
    """Apply the MLP half of a layer: out_i = h_i + W2 relu(W1 h_i)."""
    H = tm.data
    D = H.shape[0]
    if layer.W1.shape[1] != D or layer.W2.shape[0] != D:
        raise ForwardError("MLP weight shape does not match stream dim")
    if layer.W1.shape[0] != layer.W2.shape[1]:
        raise ForwardError("W1/W2 hidden widths disagree")
    hidden = np.maximum(layer.W1 @ H, 0.0)
    out = H + layer.W2 @ hidden
    if not np.all(np.isfinite(out)):
        raise ForwardError("non-finite value in MLP output")
    return TokenMatrix(out, tm.layout, tm.n_source, tm.n_target)


def layer_forward(layer: TransformerLayer, tm: TokenMatrix) -> TokenMatrix:
    return mlp_forward(layer, attn_forward(layer, tm))


def forward(tf: Transformer, tm: TokenMatrix) -> TokenMatrix:
    out = tm.copy()
    for i, layer in enumerate(tf.layers):
        try:
            out = layer_forward(layer, out)
        except ForwardError as e:
            raise ForwardError(f"layer {i}: {e}") from e
    return out


def forward_trace(tf: Transformer, tm: TokenMatrix) -> tuple[TokenMatrix, list[TokenMatrix]]:
    """Forward pass keeping the stream after every layer."""
    out = tm.copy()
    trace = []
    for i, layer in enumerate(tf.layers):
        try:
            out = layer_forward(layer, out)
        except ForwardError as e:
            raise ForwardError(f"layer {i}: {e}") from e
        trace.append(out)
    return out, trace


def read_output(tf: Transformer, tm: TokenMatrix) -> float:
    """Run the transformer and read the scalar at its declared output slot."""
    out = forward(tf, tm)
    name, col = tf.readout
    c = out.query_index if col is None else col
    return float(out.data[out.layout.row(name), c])


def operator_norm(M: np.ndarray, tol: float = 1e-8, max_iter: int = 2000) -> float:
    """Spectral norm by power iteration on M^T M with a deterministic start."""
    if M.size == 0:
        return 0.0
    n = M.shape[1]
    v = np.ones(n) + np.linspace(0.0, 0.5, n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new_sigma = float(np.sqrt(nw))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-30):
            return new_sigma
        sigma = new_sigma
    return sigma


def layer_norm(layer: TransformerLayer) -> float:
    """max_m max(|Q_m|, |K_m|) + sum_m |V_m| + |W1| + |W2|  (operator norms)."""
    qk = 0.0
    vsum = 0.0
    for head in layer.heads:
        qk = max(qk, operator_norm(head.Q), operator_norm(head.K))
        vsum += operator_norm(head.V)
    return qk + vsum + operator_norm(layer.W1) + operator_norm(layer.W2)


def tf_norm(tf: Transformer) -> float:
    if not tf.layers:
        return 0.0
    return max(layer_norm(layer) for layer in tf.layers)


def describe(tf: Transformer) -> dict:
    """Structural summary: per-layer head counts, norms, and slot usage."""
    layers = []
    for layer in tf.layers:
        read, written = set(), set()
        for name, a, b in tf.layout.ranges:
            rows = slice(a, b)
            for head in layer.heads:
                if np.any(head.Q[:, rows]) or np.any(head.K[:, rows]) or np.any(head.V[:, rows]):
                    read.add(name)
                if np.any(head.V[rows, :]):
                    written.add(name)
            if layer.W1.size and np.any(layer.W1[:, rows]):
                read.add(name)
            if layer.W2.size and np.any(layer.W2[rows, :]):
                written.add(name)
        layers.append(
            {
                "heads": len(layer.heads),
                "mlp_hidden": int(layer.W1.shape[0]),
                "norm": layer_norm(layer),
                "reads": sorted(read),
                "writes": sorted(written),
            }
        )
    return {
        "dim": tf.layout.dim,
        "num_layers": len(tf.layers),
        "layout": {n: [a, b] for n, a, b in tf.layout.ranges},
        "readout": [tf.readout[0], tf.readout[1]],
        "tf_norm": tf_norm(tf) if tf.layers else 0.0,
        "layers": layers,
    }


def _embedding(part_layout: SlotLayout, unified: SlotLayout, mapping: dict[str, str]) -> np.ndarray:
    """Row-embedding matrix P (unified.dim x part.dim) from a slot-name mapping."""
    P = np.zeros((unified.dim, part_layout.dim))
    claimed = np.zeros(unified.dim, dtype=bool)
    for part_name in part_layout.names:
        if part_name not in mapping:
            raise LayoutError(f"no mapping for part slot {part_name!r}")
        uni_name = mapping[part_name]
        src = part_layout.rows(part_name)
        dst = unified.rows(uni_name)
        if (src.stop - src.start) != (dst.stop - dst.start):
            raise LayoutError(
                f"slot {part_name!r} width {src.stop - src.start} does not match "
                f"unified {uni_name!r} width {dst.stop - dst.start}"
            )
        if claimed[dst].any():
            raise LayoutError(f"embedding not injective at unified slot {uni_name!r}")
        claimed[dst] = True
        for i in range(src.stop - src.start):
            P[dst.start + i, src.start + i] = 1.0
    return P


SHARED_SLOTS = ("x", "y", "t", "s", "one")


def union_layout(
    parts: list[Transformer], prefixes: list[str]
) -> tuple[SlotLayout, list[dict[str, str]]]:
    """Unified layout sharing the base slots and namespacing each part's workspace."""
    if len(parts) != len(prefixes):
        raise LayoutError("one prefix per part required")
    base = parts[0].layout
    slots: list[tuple[str, int]] = []
    for name in SHARED_SLOTS:
        if base.has(name):
            slots.append((name, base.width(name)))
    mappings: list[dict[str, str]] = []
    for part, prefix in zip(parts, prefixes):
        mapping = {}
        for name in part.layout.names:
            if name in SHARED_SLOTS:
                if not base.has(name) or part.layout.width(name) != base.width(name):
                    raise LayoutError(f"part {prefix!r}: shared slot {name!r} disagrees")
                mapping[name] = name
            else:
                uni = f"{prefix}.{name}"
                slots.append((uni, part.layout.width(name)))
                mapping[name] = uni
        mappings.append(mapping)
    return SlotLayout.build(slots), mappings


def compose(
    parts: list[Transformer],
    unified: SlotLayout,
    mappings: list[dict[str, str]],
    readout: tuple[str, int | None] | None = None,
) -> Transformer:
    """Stack parts sequentially on a unified stream.

    Each part's weights are conjugated by its row embedding; cross-part claims on
    the same unified workspace slot are rejected.
    """
    if len(parts) != len(mappings):
        raise LayoutError("one mapping per part required")
    claimed_by: dict[str, int] = {}
    for idx, mapping in enumerate(mappings):
        for part_name, uni_name in mapping.items():
            if part_name in SHARED_SLOTS and uni_name == part_name:
                continue
            if uni_name in claimed_by and claimed_by[uni_name] != idx:
                raise LayoutError(f"overlapping workspace claim on {uni_name!r}")
            claimed_by[uni_name] = idx
    layers: list[TransformerLayer] = []
    for part, mapping in zip(parts, mappings):
        P = _embedding(part.layout, unified, mapping)
        for layer in part.layers:
            heads = [
                AttentionHead(h.Q @ P.T, h.K @ P.T, P @ h.V @ P.T)
                for h in layer.heads
            ]
            layers.append(TransformerLayer(heads, layer.W1 @ P.T, P @ layer.W2))
    if readout is None:
        last = parts[-1]
        name, col = last.readout
        readout = (mappings[-1][name], col)
    return Transformer(layers, unified, readout)


def to_json(tf: Transformer) -> str:
    obj = {
        "layout": [[n, a, b] for n, a, b in tf.layout.ranges],
        "readout": [tf.readout[0], tf.readout[1]],
        "layers": [
            {
                "heads": [
                    {"Q": h.Q.tolist(), "K": h.K.tolist(), "V": h.V.tolist()}
                    for h in layer.heads
                ],
                "W1": layer.W1.tolist(),
                "W2": layer.W2.tolist(),
            }
            for layer in tf.layers
        ],
    }
    return json.dumps(obj)


def from_json(s: str) -> Transformer:
    obj = json.loads(s)
    layout = SlotLayout(tuple((n, a, b) for n, a, b in obj["layout"]))
    layers = []
    for lobj in obj["layers"]:
        heads = [
            AttentionHead(np.array(h["Q"]), np.array(h["K"]), np.array(h["V"]))
            for h in lobj["heads"]
        ]
        W1 = np.array(lobj["W1"])
        W2 = np.array(lobj["W2"])
        if W1.size == 0:
            W1 = W1.reshape(0, layout.dim)
        if W2.size == 0:
            W2 = W2.reshape(layout.dim, 0)
        layers.append(TransformerLayer(heads, W1, W2))
    readout = (obj["readout"][0], obj["readout"][1])
    return Transformer(layers, layout, readout)
