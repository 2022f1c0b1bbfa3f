"""Attention-flow diagnostics: vision attention ratio, visual-attention entropy, layer profiles.

Attention dumps are binary files holding one or more records. Each record is

    magic    7 bytes  b"VIFADP1"
    version  u32
    n_layers, n_heads, T                       u32 each
    visual, question, answer spans (start,end) 6 x u32
    grid_h, grid_w                             u32 each
    payload  n_layers * n_heads * T * T f32, layer-major then head, rows row-major

All integers and floats are little-endian.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

DUMP_MAGIC = b"VIFADP1"
DUMP_VERSION = 1
_HEADER = struct.Struct("<7sI3I6I2I")
SCOPES = ("gen", "text")
DUMP_ROWSUM_TOL = 1e-4


def _probs(attn) -> np.ndarray:
    p = attn.probs if hasattr(attn, "probs") else attn
    p = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 3:
        p = p[None]
    return p


def scope_rows(layout, scope: str) -> np.ndarray:
    if scope in ("gen", "generation-positions"):
        return layout.generation_rows()
    if scope in ("text", "all-text-positions"):
        return layout.text_rows()
    raise ContractError(f"unknown query scope {scope!r}", module="flowstat")


def vision_attention_ratio(attn, layout, scope: str = "gen") -> float:
    """Mean over in-scope (batch, head, row) of the attention mass on visual key columns."""
    p = _probs(attn)
    rows = scope_rows(layout, scope)
    if rows.size == 0:
        raise ContractError("empty query scope", module="flowstat")
    vs, ve = layout.visual_span
    mass = p[:, :, rows, vs:ve].sum(axis=-1)
    return float(mass.mean())


def visual_row_entropies(attn, layout, scope: str = "gen"):
    """Entropy of each in-scope row restricted to visual columns and renormalized.

    Returns (entropies, n_excluded); rows with zero visual mass are excluded.
    """
    p = _probs(attn)
    rows = scope_rows(layout, scope)
    if rows.size == 0:
        raise ContractError("empty query scope", module="flowstat")
    vs, ve = layout.visual_span
    v = p[:, :, rows, vs:ve].reshape(-1, ve - vs)
    mass = v.sum(axis=-1)
    keep = mass > 0
    q = v[keep] / mass[keep, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(q > 0, q * np.log(q), 0.0).sum(axis=-1)
    return ent, int((~keep).sum())


def visual_attention_entropy(attn, layout, scope: str = "gen") -> float:
    ent, _ = visual_row_entropies(attn, layout, scope)
    if ent.size == 0:
        raise ContractError("every in-scope row has zero visual mass", module="flowstat")
    return float(ent.mean())


@dataclass
class LayerStats:
    layer: int
    ratio: float
    entropy: float
    p5: float
    p25: float
    p50: float
    p75: float
    p95: float

    def quantiles(self):
        return (self.p5, self.p25, self.p50, self.p75, self.p95)


@dataclass
class AttentionDump:
    n_layers: int
    n_heads: int
    T: int
    visual_span: tuple
    question_span: tuple
    answer_span: tuple
    grid_h: int
    grid_w: int
    probs: np.ndarray  # [n_layers, n_heads, T, T] float32

    def layout(self):
        from .backbone import ModalityLayout

        return ModalityLayout(self.visual_span, self.question_span, self.answer_span, self.grid_h, self.grid_w)

    def to_bytes(self) -> bytes:
        p = np.ascontiguousarray(self.probs, dtype="<f4")
        if p.shape != (self.n_layers, self.n_heads, self.T, self.T):
            raise FormatError(f"payload shape {p.shape} inconsistent with header", module="flowstat")
        head = _HEADER.pack(DUMP_MAGIC, DUMP_VERSION, self.n_layers, self.n_heads, self.T,
                            *self.visual_span, *self.question_span, *self.answer_span, self.grid_h, self.grid_w)
        return head + p.tobytes()


def write_dumps(path, dumps):
    with open(path, "wb") as fh:
        for d in dumps:
            fh.write(d.to_bytes())


def parse_dumps(buf: bytes, validate: bool = True) -> list:
    """Parse every record in ``buf``; any malformed or truncated record raises FormatError."""
    out = []
    off = 0
    n = len(buf)
    while off < n:
        if n - off < _HEADER.size:
            raise FormatError("truncated header", offset=off, module="flowstat")
        fields = _HEADER.unpack_from(buf, off)
        if fields[0] != DUMP_MAGIC:
            raise FormatError("bad magic", offset=off, module="flowstat")
        if fields[1] != DUMP_VERSION:
            raise FormatError(f"unsupported version {fields[1]}", offset=off + 7, module="flowstat")
        n_layers, n_heads, T = fields[2:5]
        spans = fields[5:11]
        grid_h, grid_w = fields[11:13]
        vspan, qspan, aspan = tuple(spans[0:2]), tuple(spans[2:4]), tuple(spans[4:6])
        if aspan[1] != T or vspan[1] - vspan[0] != grid_h * grid_w:
            raise FormatError("header spans inconsistent with T or grid", offset=off + 19, module="flowstat")
        start = off + _HEADER.size
        size = n_layers * n_heads * T * T * 4
        if n - start < size:
            raise FormatError(f"truncated payload: need {size} bytes, have {n - start}", offset=start, module="flowstat")
        probs = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=start).reshape(n_layers, n_heads, T, T)
        d = AttentionDump(n_layers, n_heads, T, vspan, qspan, aspan, grid_h, grid_w, probs)
        if validate:
            _validate_dump(d, start)
        out.append(d)
        off = start + size
    return out


def _validate_dump(d: AttentionDump, offset: int):
    try:
        lay = d.layout()
    except Exception as exc:
        raise FormatError(f"invalid layout in header: {exc}", offset=offset, module="flowstat") from None
    mask = lay.visibility()
    p = d.probs.astype(np.float64)
    if not np.isfinite(p).all() or (p < 0).any():
        raise FormatError("payload has negative or non-finite probabilities", offset=offset, module="flowstat")
    if (p[..., ~mask] != 0).any():
        raise FormatError("payload has mass at masked positions", offset=offset, module="flowstat")
    if np.abs(p.sum(axis=-1) - 1.0).max() > DUMP_ROWSUM_TOL:
        raise FormatError("payload rows are not row-stochastic", offset=offset, module="flowstat")


def read_dumps(path) -> list:
    with open(path, "rb") as fh:
        return parse_dumps(fh.read())


def layer_profile(dumps, scope: str = "gen") -> list:
    """Per-layer statistics pooled over every record in ``dumps``."""
    if isinstance(dumps, AttentionDump):
        dumps = [dumps]
    if not dumps:
        raise ContractError("no dump records", module="flowstat")
    n_layers = dumps[0].n_layers
    if any(d.n_layers != n_layers for d in dumps):
        raise FormatError("records disagree on layer count", module="flowstat")
    stats = []
    for layer in range(n_layers):
        ratios, ents, weights = [], [], []
        for d in dumps:
            lay = d.layout()
            p = d.probs[layer].astype(np.float64)[None]
            rows = scope_rows(lay, scope)
            vs, ve = lay.visual_span
            ratios.append(p[:, :, rows, vs:ve].sum(axis=-1).reshape(-1))
            e, _ = visual_row_entropies(p, lay, scope)
            ents.append(e)
            weights.append(p[:, :, rows, vs:ve].reshape(-1))
        r = np.concatenate(ratios)
        e = np.concatenate(ents)
        w = np.concatenate(weights)
        q = np.percentile(w, [5, 25, 50, 75, 95]) if w.size else np.zeros(5)
        stats.append(LayerStats(layer, float(r.mean()), float(e.mean()) if e.size else float("nan"), *map(float, q)))
    return stats


def stats_csv(stats) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "ratio", "entropy", "p5", "p25", "p50", "p75", "p95"])
    for s in stats:
        w.writerow([s.layer] + [repr(v) for v in (s.ratio, s.entropy, *s.quantiles())])
    return buf.getvalue()
