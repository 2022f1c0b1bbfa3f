"""Synthetic grid-world VQA with controlled question ambiguity.

Each grid cell is empty or holds an object with a color, a shape and a
"marked" flag. Three question templates are generated:

* attribute-at-location  ``COLOR? AT row col``   -> color of the object there
* location-of-attribute  ``ROW? OF color shape`` -> row of the matching object
* relational             ``COLOR? LEFTOF shape`` -> color of the object just left of it

An ambiguous instance has at least two objects matching the question
predicate with different answers; the intended one is the marked match, so
the grid resolves the ambiguity only through a small visual cue that the
question never mentions. Answers are drawn uniformly from the closed answer
vocabulary (all colors and all rows), so a constant guess scores 1/|answers|.

Corpus files hold one instance per line::

    GRID <ids> | Q <ids> | A <ids> | TGT <cells> | DIS <cells>

where ids are token ids and cells are raster indices into the grid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .backbone import ModalityLayout
from .errors import FormatError, GenerationError, LayoutError

Q_LEN = 4
A_LEN = 1
WORDS = ("Q_COLOR", "Q_ROW", "AT", "OF", "LEFTOF", "NIL")


@dataclass(frozen=True)
class TaskConfig:
    grid_h: int = 8
    grid_w: int = 8
    n_colors: int = 8
    n_shapes: int = 4
    n_objects: int = 12
    ambiguity_rate: float = 0.5
    mark_rate: float = 0.25
    seed: int = 0

    @property
    def patch_vocab_size(self) -> int:
        """Distinct object appearances (color x shape)."""
        return self.n_colors * self.n_shapes

    def validate(self):
        cells = self.grid_h * self.grid_w
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise GenerationError(f"ambiguity rate {self.ambiguity_rate} outside [0, 1]")
        if self.grid_h < 2 or self.grid_w < 2:
            raise GenerationError("grid must be at least 2x2 for relational questions")
        if self.n_colors < 2 or self.n_shapes < 2:
            raise GenerationError("need at least 2 colors and 2 shapes so distractors can differ")
        if self.n_objects < 4:
            raise GenerationError("need at least 4 objects to build an ambiguous relational instance")
        if self.n_objects > cells // 2:
            raise GenerationError(f"{self.n_objects} objects do not fit in half of a {self.grid_h}x{self.grid_w} grid")


class Vocab:
    """Token ids shared by the generator and the backbone."""

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        self.PAD = 0
        self.EMPTY = 1
        self.patch0 = 2
        n_patch = cfg.n_colors * cfg.n_shapes * 2
        nxt = self.patch0 + n_patch
        self.word = {w: nxt + i for i, w in enumerate(WORDS)}
        nxt += len(WORDS)
        self.row0 = nxt
        nxt += cfg.grid_h
        self.col0 = nxt
        nxt += cfg.grid_w
        self.color0 = nxt
        nxt += cfg.n_colors
        self.shape0 = nxt
        nxt += cfg.n_shapes
        self.size = nxt

    def patch(self, color: int, shape: int, marked: bool) -> int:
        return self.patch0 + (color * self.cfg.n_shapes + shape) * 2 + int(marked)

    def unpatch(self, tok: int):
        """(color, shape, marked) of an object token, or None for an empty cell."""
        if tok == self.EMPTY:
            return None
        k = tok - self.patch0
        if not 0 <= k < self.cfg.n_colors * self.cfg.n_shapes * 2:
            raise FormatError(f"token {tok} is not a grid patch", module="synth-tasks")
        cs, marked = divmod(k, 2)
        color, shape = divmod(cs, self.cfg.n_shapes)
        return color, shape, bool(marked)

    def row(self, r):
        return self.row0 + r

    def col(self, c):
        return self.col0 + c

    def color(self, c):
        return self.color0 + c

    def shape(self, s):
        return self.shape0 + s

    # symbolic features: colors, shapes, mark, rows, columns
    @property
    def n_features(self) -> int:
        c = self.cfg
        return c.n_colors + c.n_shapes + 1 + c.grid_h + c.grid_w

    @property
    def row_feature(self) -> int:
        return self.cfg.n_colors + self.cfg.n_shapes + 1

    @property
    def col_feature(self) -> int:
        return self.row_feature + self.cfg.grid_h

    def feature_matrix(self) -> np.ndarray:
        """Multi-hot [vocab, n_features]: a patch carries its color, shape and mark; words carry their referent."""
        c = self.cfg
        F = np.zeros((self.size, self.n_features))
        mark = c.n_colors + c.n_shapes
        for x in range(c.n_colors):
            F[self.color(x), x] = 1.0
            for s in range(c.n_shapes):
                for m in (False, True):
                    t = self.patch(x, s, m)
                    F[t, x] = F[t, c.n_colors + s] = 1.0
                    F[t, mark] = float(m)
        for s in range(c.n_shapes):
            F[self.shape(s), c.n_colors + s] = 1.0
        for r in range(c.grid_h):
            F[self.row(r), self.row_feature + r] = 1.0
        for col in range(c.grid_w):
            F[self.col(col), self.col_feature + col] = 1.0
        return F

    @cached_property
    def answer_tokens(self) -> np.ndarray:
        return np.concatenate([self.color0 + np.arange(self.cfg.n_colors), self.row0 + np.arange(self.cfg.grid_h)])


@dataclass(frozen=True)
class SynthInstance:
    grid: tuple  # flat token ids, raster order
    question: tuple
    answer: tuple
    target_cells: tuple
    distractor_cells: tuple
    grid_h: int
    grid_w: int

    @property
    def ambiguous(self) -> bool:
        return bool(self.distractor_cells)

    def tokens(self) -> np.ndarray:
        return np.array(self.grid + self.question + self.answer, dtype=np.int64)

    def grid_array(self) -> np.ndarray:
        return np.array(self.grid, dtype=np.int64).reshape(self.grid_h, self.grid_w)


def hypotheses(inst: SynthInstance, vocab: Vocab) -> list:
    """Every (answer token, justifying cells, marked) reading of the question on this grid.

    Marks are ignored when matching, so an ambiguous instance yields several
    readings with different answers.
    """
    h, w = inst.grid_h, inst.grid_w
    g = inst.grid_array()
    q = inst.question
    W = vocab.word
    objs = {(r, c): vocab.unpatch(int(g[r, c])) for r in range(h) for c in range(w)}
    out = []
    if q[0] == W["Q_COLOR"] and q[1] == W["AT"]:
        r, c = q[2] - vocab.row0, q[3] - vocab.col0
        o = objs[(r, c)]
        if o is not None:
            out.append((vocab.color(o[0]), (r * w + c,), o[2]))
    elif q[0] == W["Q_ROW"] and q[1] == W["OF"]:
        x, s = q[2] - vocab.color0, q[3] - vocab.shape0
        for (r, c), o in objs.items():
            if o is not None and o[0] == x and o[1] == s:
                out.append((vocab.row(r), (r * w + c,), o[2]))
    elif q[0] == W["Q_COLOR"] and q[1] == W["LEFTOF"]:
        s = q[2] - vocab.shape0
        for (r, c), o in objs.items():
            if o is not None and o[1] == s and c >= 1 and objs[(r, c - 1)] is not None:
                out.append((vocab.color(objs[(r, c - 1)][0]), (r * w + c, r * w + c - 1), o[2]))
    else:
        raise FormatError(f"unknown question template {q}", module="synth-tasks")
    return sorted(out, key=lambda t: t[1])


def solve(inst: SynthInstance, vocab: Vocab) -> int | None:
    """Rule-based answer: the unique reading, else the marked one."""
    hyps = hypotheses(inst, vocab)
    if len(hyps) == 1:
        return hyps[0][0]
    marked = [hy for hy in hyps if hy[2]]
    return marked[0][0] if len(marked) == 1 else None


class _Builder:
    def __init__(self, cfg: TaskConfig, vocab: Vocab, rng: np.random.Generator):
        self.cfg, self.vocab, self.rng = cfg, vocab, rng
        self.cells: dict = {}

    def free_cells(self, min_col: int = 0):
        return [(r, c) for r in range(self.cfg.grid_h) for c in range(min_col, self.cfg.grid_w) if (r, c) not in self.cells]

    def pick(self, candidates):
        if not candidates:
            raise GenerationError("ran out of free cells while placing objects")
        return candidates[self.rng.integers(len(candidates))]

    def mark(self) -> bool:
        return bool(self.rng.random() < self.cfg.mark_rate)

    def fill(self, forbid):
        """Top up with random objects whose (color, shape) passes ``forbid``."""
        cfg = self.cfg
        while len(self.cells) < cfg.n_objects:
            cell = self.pick(self.free_cells())
            while True:
                color, shape = int(self.rng.integers(cfg.n_colors)), int(self.rng.integers(cfg.n_shapes))
                if not forbid(color, shape):
                    break
            self.cells[cell] = (color, shape, self.mark())

    def grid(self) -> tuple:
        v = self.vocab
        out = []
        for r in range(self.cfg.grid_h):
            for c in range(self.cfg.grid_w):
                o = self.cells.get((r, c))
                out.append(v.EMPTY if o is None else v.patch(*o))
        return tuple(out)


def _other(rng, n, exclude):
    choices = [i for i in range(n) if i not in exclude]
    return int(choices[rng.integers(len(choices))])


def _make_instance(cfg: TaskConfig, vocab: Vocab, rng: np.random.Generator, ambiguous: bool) -> SynthInstance:
    w = cfg.grid_w
    n_answers = cfg.n_colors + cfg.grid_h
    a = int(rng.integers(n_answers))
    b = _Builder(cfg, vocab, rng)
    W = vocab.word
    cell_id = lambda rc: rc[0] * w + rc[1]  # noqa: E731
    if a >= cfg.n_colors:
        # location-of-attribute
        row = a - cfg.n_colors
        x, s = int(rng.integers(cfg.n_colors)), int(rng.integers(cfg.n_shapes))
        tgt = (row, int(rng.integers(w)))
        b.cells[tgt] = (x, s, True if ambiguous else b.mark())
        dis = []
        if ambiguous:
            n_d = 1 + int(rng.integers(2))
            rows = [r for r in range(cfg.grid_h) if r != row]
            rng.shuffle(rows)
            for r in rows[:n_d]:
                cell = b.pick([(r, c) for c in range(w) if (r, c) not in b.cells])
                b.cells[cell] = (x, s, False)
                dis.append(cell)
        b.fill(lambda c_, s_: (c_, s_) == (x, s))
        q = (W["Q_ROW"], W["OF"], vocab.color(x), vocab.shape(s))
        ans = vocab.row(row)
        tcells, dcells = (cell_id(tgt),), tuple(sorted(cell_id(c) for c in dis))
    else:
        x = a
        relational = ambiguous or bool(rng.integers(2))
        if not relational:
            tgt = (int(rng.integers(cfg.grid_h)), int(rng.integers(w)))
            b.cells[tgt] = (x, int(rng.integers(cfg.n_shapes)), b.mark())
            b.fill(lambda c_, s_: False)
            q = (W["Q_COLOR"], W["AT"], vocab.row(tgt[0]), vocab.col(tgt[1]))
            tcells, dcells = (cell_id(tgt),), ()
        else:
            s = int(rng.integers(cfg.n_shapes))

            def place_pair(color, marked):
                for _ in range(200):
                    anchor = b.pick(b.free_cells(min_col=1))
                    left = (anchor[0], anchor[1] - 1)
                    if left not in b.cells:
                        break
                else:
                    raise GenerationError("could not place an anchor/neighbor pair")
                b.cells[anchor] = (int(rng.integers(cfg.n_colors)), s, marked)
                b.cells[left] = (color, _other(rng, cfg.n_shapes, {s}), b.mark())
                return anchor, left

            anchor, left = place_pair(x, True if ambiguous else b.mark())
            dis = []
            if ambiguous:
                dis.extend(place_pair(_other(rng, cfg.n_colors, {x}), False))
            b.fill(lambda c_, s_: s_ == s)
            q = (W["Q_COLOR"], W["LEFTOF"], vocab.shape(s), W["NIL"])
            tcells = tuple(sorted((cell_id(anchor), cell_id(left))))
            dcells = tuple(sorted(cell_id(c) for c in dis))
        ans = vocab.color(x)
    inst = SynthInstance(b.grid(), q, (ans,), tcells, dcells, cfg.grid_h, cfg.grid_w)
    _verify(inst, vocab)
    return inst


def _verify(inst: SynthInstance, vocab: Vocab):
    hyps = hypotheses(inst, vocab)
    gt = inst.answer[0]
    answers = {hy[0] for hy in hyps}
    if inst.ambiguous:
        if len(answers) < 2:
            raise GenerationError("ambiguous instance admits fewer than two answers")
        chosen = [hy for hy in hyps if hy[0] == gt]
        if len(chosen) != 1 or not chosen[0][2]:
            raise GenerationError("ground truth does not select exactly one marked reading")
    elif len(hyps) != 1 or hyps[0][0] != gt:
        raise GenerationError("unambiguous instance has more than one reading")
    if solve(inst, vocab) != gt:
        raise GenerationError("rule solver disagrees with the generated answer")


def generate(config: TaskConfig, n: int) -> list:
    """``n`` instances; exactly round(rate * n) of them are ambiguous. Deterministic in ``config.seed``."""
    if n < 1:
        raise GenerationError("n must be at least 1")
    config.validate()
    vocab = Vocab(config)
    k = int(round(config.ambiguity_rate * n))
    order = np.random.default_rng([config.seed, 0xA5]).permutation(n)
    amb = np.zeros(n, dtype=bool)
    amb[order[:k]] = True
    out = []
    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        out.append(_make_instance(config, vocab, rng, bool(amb[i])))
    return out


def layout_for(config: TaskConfig, with_answer: bool = True) -> ModalityLayout:
    return ModalityLayout.build(config.grid_h, config.grid_w, Q_LEN, A_LEN if with_answer else 0)


def batch_tokens(instances, with_answer: bool = True) -> np.ndarray:
    toks = np.stack([inst.tokens() for inst in instances])
    return toks if with_answer else toks[:, :-A_LEN]


def localization_score(v_hat, inst: SynthInstance) -> float:
    """Importance-map mass on the instance's target cells."""
    v = np.asarray(getattr(v_hat, "v_hat", v_hat).data if hasattr(getattr(v_hat, "v_hat", v_hat), "data")
                   else getattr(v_hat, "v_hat", v_hat), dtype=np.float64).reshape(-1)
    if v.size != inst.grid_h * inst.grid_w:
        raise LayoutError(f"map has {v.size} cells, grid has {inst.grid_h * inst.grid_w}", module="synth-tasks")
    return float(v[list(inst.target_cells)].sum())


# -- serialization --------------------------------------------------------

def encode_line(inst: SynthInstance) -> str:
    j = lambda xs: " ".join(str(int(x)) for x in xs)  # noqa: E731
    return f"GRID {j(inst.grid)} | Q {j(inst.question)} | A {j(inst.answer)} | TGT {j(inst.target_cells)} | DIS {j(inst.distractor_cells)}"


def decode_line(line: str, grid_h: int | None = None, grid_w: int | None = None) -> SynthInstance:
    parts = [p.strip() for p in line.strip().split("|")]
    keys = ("GRID", "Q", "A", "TGT", "DIS")
    if len(parts) != 5:
        raise FormatError(f"expected 5 fields, got {len(parts)}", module="synth-tasks")
    vals = []
    for key, part in zip(keys, parts):
        toks = part.split()
        if not toks or toks[0] != key:
            raise FormatError(f"field {key} missing", module="synth-tasks")
        try:
            vals.append(tuple(int(t) for t in toks[1:]))
        except ValueError:
            raise FormatError(f"non-integer entry in {key}", module="synth-tasks") from None
    n = len(vals[0])
    if grid_h is None or grid_w is None:
        side = int(round(n ** 0.5))
        if side * side != n:
            raise FormatError("grid dims needed for a non-square grid", module="synth-tasks")
        grid_h = grid_w = side
    if grid_h * grid_w != n:
        raise FormatError(f"{n} grid ids for a {grid_h}x{grid_w} grid", module="synth-tasks")
    return SynthInstance(vals[0], vals[1], vals[2], vals[3], vals[4], grid_h, grid_w)


def write_corpus(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(encode_line(inst) + "\n")


def read_corpus(path, grid_h: int | None = None, grid_w: int | None = None) -> list:
    with open(path, encoding="utf-8") as fh:
        return [decode_line(line, grid_h, grid_w) for line in fh if line.strip()]


def content_hash(inst: SynthInstance) -> int:
    """48-bit content hash (exactly representable as a float64)."""
    return int.from_bytes(hashlib.sha256(encode_line(inst).encode()).digest()[:6], "big")
