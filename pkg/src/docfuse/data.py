"""Synthetic layout-document corpora.

Documents are pages of key/value token pairs laid out on a virtual slot grid
(two columns by eight rows per page). Each QA example asks for the value of one
key. By default values are typed: every key draws from its own slice of the
value ids, the way a date field holds dates. Two variants stress specific parts
of the model:

* visual-marker documents contain the queried key twice with different values;
  only a marker channel in the feature grid (painted over the key and value
  boxes) says which occurrence is meant, so text alone is at chance;
* needle documents are long (many pages) and carry a single key/value pair on
  a uniformly sampled page; every other slot holds filler tokens.

Token vocabulary: ``PAD=0, EOS=1, BOS=2, QUESTION=3``, filler ids ``4..7``,
then a key range and a value range splitting the rest one third / two thirds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .layout import BoundingBox, FeatureGrid, LayoutDocument, Token, read_document, write_document
from .model import BOS, EOS, PAD

QUESTION = 3
FILLER_LO, FILLER_HI = 4, 8
SLOT_ROWS, SLOT_COLS = 8, 2
MARKER_CH, INK_CH = 0, 1


@dataclass(frozen=True)
class Vocab:
    size: int
    key_count: int | None = None  # default: one third of the non-reserved ids

    @property
    def num_keys(self) -> int:
        return (self.size - FILLER_HI) // 3 if self.key_count is None else self.key_count

    @property
    def keys(self) -> range:
        return range(FILLER_HI, FILLER_HI + self.num_keys)

    @property
    def values(self) -> range:
        return range(FILLER_HI + self.num_keys, self.size)

    def is_key(self, tok: int) -> bool:
        return tok in self.keys


@dataclass
class CorpusSpec:
    num_docs: int = 100
    pages_per_doc: tuple[int, int] = (1, 3)
    keys_per_page: tuple[int, int] = (4, 8)
    value_len: tuple[int, int] = (1, 1)
    vocab_size: int = 128
    num_keys: int | None = None
    visual_marker_fraction: float = 0.0
    needle_mode: bool = False
    needle_position: str = "uniform"  # uniform | first | last
    questions_per_doc: int = 1
    value_domains: str = "typed"  # typed | shared
    grid_size: int = 16
    d_vis: int = 4
    noise: float = 0.05
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("pages_per_doc", "keys_per_page", "value_len"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValidationError(f"{name} range ({lo}, {hi}) is empty or negative")
        if self.pages_per_doc[0] < 1 or self.keys_per_page[0] < 1 or self.value_len[0] < 1:
            raise ValidationError("pages, keys per page and value length must be >= 1")
        for name in ("visual_marker_fraction", "test_fraction", "noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.needle_position not in ("uniform", "first", "last"):
            raise ValidationError(f"unknown needle_position {self.needle_position!r}")
        if self.value_domains not in ("typed", "shared"):
            raise ValidationError(f"unknown value_domains {self.value_domains!r}")
        if self.questions_per_doc < 1:
            raise ValidationError("questions_per_doc must be >= 1")
        if self.d_vis < 2:
            raise ValidationError("d_vis must be >= 2 (marker and ink channels)")
        if self.vocab_size < FILLER_HI + 3:
            raise ValidationError("vocab_size too small for the reserved token ranges")
        if self.num_keys is not None and not 1 <= self.num_keys <= self.vocab_size - FILLER_HI - 1:
            raise ValidationError(f"num_keys must leave at least one value id, got {self.num_keys}")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.num_keys)


@dataclass
class QAExample:
    doc_id: str
    question: list[int]
    answer: list[int]
    evidence_page: int
    marker: bool = False
    doc_pages: int = 1

    def to_record(self) -> dict:
        return asdict(self)


def slot_boxes(slot: int, page: int, value_len: int) -> tuple[BoundingBox, list[BoundingBox]]:
    """Key box and value boxes of a slot; slots never overlap one another."""
    row, col = divmod(slot, SLOT_COLS)
    x = col / SLOT_COLS
    y0, y1 = row / SLOT_ROWS + 0.02, row / SLOT_ROWS + 0.10
    key = BoundingBox(x + 0.02, y0, x + 0.22, y1, page)
    width = 0.22 / value_len
    vals = [BoundingBox(x + 0.25 + k * width, y0, x + 0.25 + (k + 1) * width - 0.01, y1, page)
            for k in range(value_len)]
    return key, vals


def _paint(grid: np.ndarray, box: BoundingBox, ch: int, value: float = 1.0) -> None:
    G = grid.shape[1]
    r0, r1 = int(np.floor(box.y0 * G)), int(np.ceil(box.y1 * G))
    c0, c1 = int(np.floor(box.x0 * G)), int(np.ceil(box.x1 * G))
    grid[box.page, r0:r1, c0:c1, ch] = value


class _DocBuilder:
    def __init__(self, pages: int, spec: CorpusSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.pages = pages
        G = spec.grid_size
        self.grid = np.zeros((pages, G, G, spec.d_vis))
        if spec.d_vis > 2 and spec.noise > 0:
            self.grid[..., 2:] = np.round(rng.normal(0.0, spec.noise, (pages, G, G, spec.d_vis - 2)), 4)
        self.slots: dict[int, list[tuple[int, int, list[int]]]] = {p: [] for p in range(pages)}

    def place(self, page: int, slot: int, key: int, value: list[int]) -> None:
        self.slots[page].append((slot, key, value))

    def build(self, marked: tuple[int, int] | None) -> LayoutDocument:
        tokens = []
        for p in range(self.pages):
            for slot, key, value in sorted(self.slots[p]):
                kbox, vboxes = slot_boxes(slot, p, len(value))
                tokens.append(Token(key, kbox, f"k{key}" if key >= FILLER_HI else f"f{key}"))
                _paint(self.grid, kbox, INK_CH)
                if marked == (p, slot):
                    _paint(self.grid, kbox, MARKER_CH)
                for v, vb in zip(value, vboxes):
                    tokens.append(Token(v, vb, f"v{v}" if v >= FILLER_HI else f"f{v}"))
                    _paint(self.grid, vb, INK_CH)
                    if marked == (p, slot):
                        _paint(self.grid, vb, MARKER_CH)
        return LayoutDocument(tokens, FeatureGrid(self.grid))


def _sample_range(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def value_domain(key: int, vocab: Vocab, typed: bool) -> np.ndarray:
    """Value ids a key may take: its own interleaved slice when ``typed``."""
    values = np.array(list(vocab.values))
    if not typed:
        return values
    return values[key - vocab.keys.start::vocab.num_keys]


def generate_examples(spec: CorpusSpec) -> list[tuple[str, LayoutDocument, QAExample]]:
    """Build ``(doc_id, document, qa)`` triples deterministically from ``spec``.

    Documents with several questions appear once per question.
    """
    rng = np.random.default_rng(spec.seed)
    vocab = spec.vocab
    typed = spec.value_domains == "typed"
    slots_per_page = SLOT_ROWS * SLOT_COLS
    if spec.keys_per_page[1] > slots_per_page:
        raise ValidationError(f"keys_per_page up to {spec.keys_per_page[1]} exceeds {slots_per_page} slots per page")
    if not spec.needle_mode and spec.pages_per_doc[1] * spec.keys_per_page[1] + 1 > vocab.num_keys:
        raise ValidationError(
            f"up to {spec.pages_per_doc[1] * spec.keys_per_page[1]} distinct keys per document but only "
            f"{vocab.num_keys} key ids in a vocabulary of {spec.vocab_size}")
    if typed and min(len(value_domain(k, vocab, True)) for k in vocab.keys) < 2:
        raise ValidationError("typed values need at least two value ids per key; enlarge the vocabulary")

    n_marker = int(round(spec.visual_marker_fraction * spec.num_docs)) if not spec.needle_mode else 0
    marker_ids = set(rng.permutation(spec.num_docs)[:n_marker].tolist())
    # balanced first/second choice keeps first-match answering at chance
    mark_second = rng.permutation(np.arange(n_marker) % 2 == 1)
    k_marker = 0
    keys = np.array(list(vocab.keys))
    out = []
    for i in range(spec.num_docs):
        doc_id = f"doc{i:05d}"
        pages = _sample_range(rng, spec.pages_per_doc)
        b = _DocBuilder(pages, spec, rng)

        def new_value(key):
            dom = value_domain(key, vocab, typed)
            return [int(v) for v in rng.choice(dom, size=_sample_range(rng, spec.value_len))]

        if spec.needle_mode:
            qkey = int(rng.choice(keys))
            if spec.needle_position == "uniform":
                ev_page = int(rng.integers(0, pages))
            else:
                ev_page = 0 if spec.needle_position == "first" else pages - 1
            answer = new_value(qkey)
            for p in range(pages):
                n = _sample_range(rng, spec.keys_per_page)
                slots = rng.choice(slots_per_page, size=n, replace=False)
                for k, s in enumerate(slots):
                    if p == ev_page and k == 0:
                        b.place(p, int(s), qkey, answer)
                    else:
                        filler = rng.integers(FILLER_LO, FILLER_HI, size=1 + len(answer))
                        b.place(p, int(s), int(filler[0]), [int(f) for f in filler[1:]])
            doc = b.build(None)
            doc.meta = {"evidence_page": ev_page}
            out.append((doc_id, doc, QAExample(doc_id, [QUESTION, qkey], answer, ev_page, False, pages)))
            continue

        counts = [_sample_range(rng, spec.keys_per_page) for _ in range(pages)]
        is_marker = i in marker_ids
        doc_keys = [int(k) for k in rng.choice(keys, size=sum(counts), replace=False)]
        positions = []
        for p, n in enumerate(counts):
            positions += [(p, int(s)) for s in rng.choice(slots_per_page, size=n, replace=False)]
        nq = min(spec.questions_per_doc, len(doc_keys))
        qidxs = [int(k) for k in rng.choice(len(doc_keys), size=nq, replace=False)]
        qidx = qidxs[0]  # the duplicated key on marker documents
        vals = [new_value(k) for k in doc_keys]
        assigned = list(doc_keys)
        if is_marker:
            # one extra occurrence of the first queried key, on a free slot of a random page
            p = int(rng.integers(0, pages))
            free = sorted(set(range(slots_per_page)) - {s for pp, s in positions if pp == p})
            if not free:
                raise ValidationError("no free slot for the duplicated key; lower keys_per_page")
            positions.append((p, int(rng.choice(free))))
            assigned.append(doc_keys[qidx])
            vals.append(new_value(doc_keys[qidx]))
            while vals[-1] == vals[qidx]:
                vals[-1] = new_value(doc_keys[qidx])
        for (p, s), k, v in zip(positions, assigned, vals):
            b.place(p, s, k, v)
        marked = None
        qas = []
        for j in qidxs:
            ev_pos, answer = positions[j], vals[j]
            marker_q = is_marker and j == qidx
            if marker_q:
                occ = sorted([(positions[qidx], vals[qidx]), (positions[-1], vals[-1])])
                pick = occ[1] if mark_second[k_marker] else occ[0]
                k_marker += 1
                marked, answer = pick[0], pick[1]
                ev_pos = pick[0]
            qas.append(QAExample(doc_id, [QUESTION, doc_keys[j]], answer, ev_pos[0], marker_q, pages))
        doc = b.build(marked)
        doc.meta = {"marker": is_marker} if len(qas) > 1 else {"evidence_page": qas[0].evidence_page,
                                                               "marker": is_marker}
        out += [(doc_id, doc, qa) for qa in qas]
    return out


class ValuePermutation:
    """Training-time augmentation: relabel value ids by a random permutation
    inside each value domain, applied consistently to document and answer.

    Every relabelled example is still a valid example of the same corpus, but
    a document can no longer be answered from memory, only by reading it.
    """

    def __init__(self, vocab: Vocab, typed: bool = True):
        self.vocab = vocab
        self.domains = [value_domain(k, vocab, True) for k in vocab.keys] if typed else [
            np.array(list(vocab.values))]

    @classmethod
    def for_spec(cls, spec: CorpusSpec) -> "ValuePermutation":
        return cls(spec.vocab, spec.value_domains == "typed")

    def table(self, rng: np.random.Generator) -> np.ndarray:
        perm = np.arange(self.vocab.size)
        for dom in self.domains:
            perm[dom] = rng.permutation(dom)
        return perm

    def __call__(self, doc: LayoutDocument, question, answer, rng: np.random.Generator):
        perm = self.table(rng)
        tokens = [Token(int(perm[t.id]), t.box, f"v{perm[t.id]}" if t.id in self.vocab.values else t.text)
                  for t in doc.tokens]
        new_doc = LayoutDocument(tokens, doc.feature_grid, dict(doc.meta))
        return new_doc, [int(perm[q]) for q in question], [int(perm[a]) for a in answer]


# -- validation and oracles ----------------------------------------------
def text_only_answer(doc: LayoutDocument, question: list[int], vocab: Vocab) -> list[int]:
    """Answer by the first occurrence of the queried key, ignoring the image."""
    ids = doc.ids.tolist()
    key = question[-1]
    if key not in ids:
        return []
    k = ids.index(key) + 1
    ans = []
    while k < len(ids) and ids[k] in vocab.values:
        ans.append(ids[k])
        k += 1
    return ans


def validate_example(doc: LayoutDocument, qa: QAExample) -> None:
    """Check that the answer occurs at the evidence page and boxes are disjoint."""
    ids = doc.ids.tolist()
    pages = [t.box.page for t in doc.tokens]
    a = qa.answer
    found = any(ids[k:k + len(a)] == a and all(p == qa.evidence_page for p in pages[k:k + len(a)])
                for k in range(len(ids) - len(a) + 1))
    if not found:
        raise ValidationError(f"{qa.doc_id}: answer {a} not found on page {qa.evidence_page}")
    by_page: dict[int, list[BoundingBox]] = {}
    for t in doc.tokens:
        by_page.setdefault(t.box.page, []).append(t.box)
    for page, boxes in by_page.items():
        arr = np.array([b.as_list() for b in boxes])
        ox = (np.minimum(arr[:, None, 2], arr[None, :, 2]) - np.maximum(arr[:, None, 0], arr[None, :, 0])) > 0
        oy = (np.minimum(arr[:, None, 3], arr[None, :, 3]) - np.maximum(arr[:, None, 1], arr[None, :, 1])) > 0
        overlap = ox & oy
        np.fill_diagonal(overlap, False)
        if overlap.any():
            raise ValidationError(f"{qa.doc_id}: overlapping boxes on page {page}")


def oracle_report(examples, vocab: Vocab) -> dict:
    hits = {"marker": [0, 0], "plain": [0, 0]}
    for _, doc, qa in examples:
        kind = "marker" if qa.marker else "plain"
        hits[kind][0] += text_only_answer(doc, qa.question, vocab) == qa.answer
        hits[kind][1] += 1
    return {k: (h / n if n else None) for k, (h, n) in hits.items()} | {
        "marker_count": hits["marker"][1], "plain_count": hits["plain"][1]}


# -- corpus on disk --------------------------------------------------------
@dataclass
class Corpus:
    root: Path
    manifest: dict
    qa: list[QAExample] = field(default_factory=list)
    _docs: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[QAExample]:
        ids = set(self.manifest["splits"][name])
        return [q for q in self.qa if q.doc_id in ids]

    def document(self, doc_id: str) -> LayoutDocument:
        if doc_id not in self._docs:
            self._docs[doc_id] = read_document(self.root / "docs" / f"{doc_id}.jsonl")
        return self._docs[doc_id]

    def load_split(self, name: str) -> list[tuple[LayoutDocument, QAExample]]:
        return [(self.document(q.doc_id), q) for q in self.split(name)]


def generate_corpus(spec: CorpusSpec, out_dir) -> Corpus:
    """Write documents, ``qa.jsonl`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "docs").mkdir(parents=True, exist_ok=True)
    examples = generate_examples(spec)
    vocab = spec.vocab
    for _, doc, qa in examples:
        validate_example(doc, qa)
    oracle = oracle_report(examples, vocab)
    if oracle["marker_count"] >= 20 and oracle["marker"] > 0.55:
        raise ValidationError(f"marker examples answerable from text alone ({oracle['marker']:.2f})")
    if oracle["plain_count"] and not spec.needle_mode and oracle["plain"] < 0.99:
        raise ValidationError(f"text oracle only {oracle['plain']:.2f} on plain examples")

    docs: dict[str, LayoutDocument] = {}
    for doc_id, doc, _ in examples:
        docs.setdefault(doc_id, doc)
    for doc_id, doc in docs.items():
        write_document(doc, out / "docs" / f"{doc_id}.jsonl")
    with open(out / "qa.jsonl", "w") as fh:
        for _, _, qa in examples:
            fh.write(json.dumps(qa.to_record(), sort_keys=True) + "\n")
    # split by document so no test document is seen in training
    doc_ids = list(docs)
    order = np.random.default_rng(spec.seed + 1).permutation(len(doc_ids))
    n_test = int(round(spec.test_fraction * len(doc_ids)))
    ids = [doc_ids[k] for k in order]
    manifest = {
        "version": 1,
        "seed": spec.seed,
        "spec": asdict(spec),
        "counts": {
            "documents": len(docs),
            "qa": len(examples),
            "marker": oracle["marker_count"],
            "pages": sum(d.num_pages for d in docs.values()),
            "tokens": sum(len(d) for d in docs.values()),
        },
        "text_only_oracle": {"marker": oracle["marker"], "plain": oracle["plain"]},
        "splits": {"train": sorted(ids[n_test:]), "test": sorted(ids[:n_test])},
        "special_tokens": {"PAD": PAD, "EOS": EOS, "BOS": BOS, "QUESTION": QUESTION},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return Corpus(out, manifest, [qa for _, _, qa in examples])


def load_corpus(root) -> Corpus:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    qa = []
    with open(root / "qa.jsonl") as fh:
        for line in fh:
            if line.strip():
                qa.append(QAExample(**json.loads(line)))
    return Corpus(root, manifest, qa)
