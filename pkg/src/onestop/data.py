"""Corpus ingestion, tokenization, vocabulary, window splitting and batching.

Corpus files are JSON lines, one record per line::

    {"document": str, "question": str,
     "answer_start_char": int, "answer_end_char": int}

Character offsets index ``document``; the end offset is exclusive. Optional
keys: ``id`` and ``answer`` (answer text, which must equal the offset slice).
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")

_PUNCT = set(string.punctuation)
_CHUNK = re.compile(r"\S+")


class CorpusFormatError(ValueError):
    """One or more corpus lines could not be parsed."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        super().__init__("\n".join(f"line {n}: {msg}" for n, msg in errors))


class SplitError(ValueError):
    pass


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Tokens with their ``[start, end)`` character offsets in ``text``."""
    out = []
    for m in _CHUNK.finditer(text):
        chunk, base = m.group(), m.start()
        i, j = 0, len(chunk)
        while i < j and chunk[i] in _PUNCT:
            i += 1
        while j > i and chunk[j - 1] in _PUNCT:
            j -= 1
        for k in range(i):
            out.append((chunk[k], base + k, base + k + 1))
        if i < j:
            out.append((chunk[i:j].lower(), base + i, base + j))
        for k in range(j, len(chunk)):
            out.append((chunk[k], base + k, base + k + 1))
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach leading/trailing punctuation characters."""
    return [tok for tok, _, _ in tokenize_with_offsets(text)]


def detokenize(tokens) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token/id bijection with the reserved ids 0-4 fixed."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, token_lists, min_freq: int = 1) -> "Vocabulary":
        counts = Counter(t for toks in token_lists for t in toks)
        ordered = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                         key=lambda t: (-counts[t], t))
        return cls(ordered)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class Example:
    """A (document, question, answer span) triple over tokens.

    ``a_start``/``a_end`` are inclusive token indices into ``document``. The
    question is stored without ``<eos>``; :meth:`encode` appends it.
    """

    document: list[str]
    question: list[str]
    a_start: int
    a_end: int
    id: str = ""
    answer: list[str] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 <= self.a_start <= self.a_end < len(self.document):
            raise ValueError(
                f"span ({self.a_start}, {self.a_end}) invalid for document of length {len(self.document)}"
            )
        if self.answer is None:
            self.answer = self.document[self.a_start:self.a_end + 1]
        elif list(self.answer) != self.document[self.a_start:self.a_end + 1]:
            raise ValueError("answer tokens differ from the document slice")

    @property
    def answer_tokens(self) -> list[str]:
        return self.document[self.a_start:self.a_end + 1]

    def encode(self, vocab: Vocabulary) -> dict:
        return {
            "document": vocab.encode(self.document),
            "question": vocab.encode(self.question) + [EOS],
            "a_start": self.a_start,
            "a_end": self.a_end,
        }


@dataclass
class LoadReport:
    lines: int = 0
    loaded: int = 0
    skipped: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rejected_rate(self) -> float:
        return len(self.skipped) / self.lines if self.lines else 0.0


def char_span_to_tokens(offsets, start_char: int, end_char: int) -> tuple[int, int] | None:
    """Map a ``[start_char, end_char)`` span onto inclusive token indices.

    Returns ``None`` when the span boundaries fall inside a token.
    """
    first = next((i for i, (_, s, _) in enumerate(offsets) if s == start_char), None)
    last = next((i for i, (_, _, e) in enumerate(offsets) if e == end_char), None)
    if first is None or last is None or last < first:
        return None
    return first, last


def record_to_example(rec: dict, default_id: str = "") -> Example:
    """Convert one corpus record; raises ``ValueError`` with the reason when it must be skipped."""
    doc = rec["document"]
    s, e = int(rec["answer_start_char"]), int(rec["answer_end_char"])
    if not 0 <= s < e <= len(doc):
        raise ValueError(f"character span [{s}, {e}) outside document")
    answer_text = doc[s:e]
    if "answer" in rec and rec["answer"] != answer_text:
        raise ValueError("answer string is not the document slice at the given offsets")
    if not answer_text.strip():
        raise ValueError("empty answer")
    # tolerate surrounding whitespace in the offsets
    s += len(answer_text) - len(answer_text.lstrip())
    e -= len(answer_text) - len(answer_text.rstrip())
    offsets = tokenize_with_offsets(doc)
    span = char_span_to_tokens(offsets, s, e)
    if span is None:
        raise ValueError("answer boundaries do not align with token boundaries")
    tokens = [t for t, _, _ in offsets]
    if tokens[span[0]:span[1] + 1] != tokenize(doc[s:e]):
        raise ValueError("tokenized answer differs from the document tokens")
    question = tokenize(rec["question"])
    if not question:
        raise ValueError("empty question")
    return Example(tokens, question, span[0], span[1], id=str(rec.get("id", default_id)))


_REQUIRED = ("document", "question", "answer_start_char", "answer_end_char")


def read_jsonl(path) -> list[tuple[int, dict]]:
    """Parse a JSON-lines file; every malformed line is reported at once."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append((n, f"malformed JSON: {exc.msg}"))
                continue
            if not isinstance(rec, dict):
                errors.append((n, "record is not a JSON object"))
                continue
            records.append((n, rec))
    if errors:
        raise CorpusFormatError(errors)
    return records


def load_corpus(path, report: LoadReport | None = None) -> list[Example]:
    """Load a corpus file into Examples, skipping (and reporting) invalid records."""
    report = LoadReport() if report is None else report
    examples = []
    records = read_jsonl(path)
    missing = [(n, f"missing keys {[k for k in _REQUIRED if k not in rec]}")
               for n, rec in records if any(k not in rec for k in _REQUIRED)]
    if missing:
        raise CorpusFormatError(missing)
    for n, rec in records:
        report.lines += 1
        try:
            ex = record_to_example(rec, default_id=f"line{n}")
        except (ValueError, TypeError) as exc:
            report.skipped.append((n, str(exc)))
            continue
        examples.append(ex)
        report.loaded += 1
    return examples


def window_starts(n: int, window: int, stride: int) -> list[int]:
    if window < 1 or stride < 1:
        raise SplitError("window and stride must be positive")
    if stride > window:
        raise SplitError(f"stride {stride} exceeds window {window}")
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


@dataclass
class Window:
    start: int
    tokens: list[str]
    span: tuple[int, int] | None


def split_document(doc_tokens, qa_spans, window: int, stride: int) -> list[Window]:
    """Slide windows over a document and give every gold span to exactly one window.

    A span goes to the containing window with the largest context margin
    ``min(span_start - window_start, window_end - span_end)``; ties go to the
    earlier window. A span that no regular window contains (possible when
    ``stride > 1``) gets an extra window centred on it. The result holds one entry per (window, span) assignment,
    in window order, plus one span-less entry for each window that received
    no span.
    """
    n = len(doc_tokens)
    starts = window_starts(n, window, stride)
    for a, b in qa_spans:
        if not 0 <= a <= b < n:
            raise SplitError(f"span ({a}, {b}) outside document of length {n}")
        if b - a + 1 > window:
            raise SplitError(f"answer of length {b - a + 1} is longer than window {window}")
        if not any(s <= a and b < s + window for s in starts):
            # the stride stepped over this span: add a window centred on it
            extra = min(max(a - (window - (b - a + 1)) // 2, 0), n - window)
            starts = sorted(set(starts) | {extra})
    assigned: dict[int, list[tuple[int, int]]] = {s: [] for s in starts}
    for a, b in qa_spans:
        best, best_margin = None, None
        for s in starts:
            end = min(s + window, n) - 1
            if s <= a and b <= end:
                margin = min(a - s, end - b)
                if best_margin is None or margin > best_margin:
                    best, best_margin = s, margin
        assigned[best].append((a - best, b - best))
    out = []
    for s in starts:
        toks = list(doc_tokens[s:s + window])
        if assigned[s]:
            out.extend(Window(s, toks, span) for span in assigned[s])
        else:
            out.append(Window(s, toks, None))
    return out


def split_examples(examples, window: int, stride: int, report: LoadReport | None = None) -> list[Example]:
    """Replace each Example by its sub-document Example (one QA pair per sub-document)."""
    out = []
    for ex in examples:
        try:
            windows = split_document(ex.document, [(ex.a_start, ex.a_end)], window, stride)
        except SplitError as exc:
            if report is None:
                raise
            report.skipped.append((0, f"{ex.id}: {exc}"))
            continue
        for w in windows:
            if w.span is None:
                continue
            sub_id = ex.id if len(windows) == 1 else f"{ex.id}#w{w.start}"
            out.append(Example(w.tokens, list(ex.question), w.span[0], w.span[1], id=sub_id))
    return out


def example_to_record(ex: Example) -> dict:
    """Serialise an Example as a corpus record over its space-joined tokens."""
    doc = detokenize(ex.document)
    start_char = sum(len(t) + 1 for t in ex.document[:ex.a_start])
    end_char = start_char + len(detokenize(ex.answer_tokens))
    return {
        "id": ex.id,
        "document": doc,
        "question": detokenize(ex.question),
        "answer_start_char": start_char,
        "answer_end_char": end_char,
        "a_start_tok": ex.a_start,
        "a_end_tok": ex.a_end,
    }


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class Batch:
    doc_ids: np.ndarray    # [B, Ld]
    doc_mask: np.ndarray   # [B, Ld] True on real tokens
    dec_in: np.ndarray     # [B, Lq] <bos> q_1 .. q_{n}
    dec_out: np.ndarray    # [B, Lq] q_1 .. q_{n} <eos>
    q_mask: np.ndarray     # [B, Lq]
    starts: np.ndarray     # [B]
    ends: np.ndarray       # [B]
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.doc_ids.shape[0]

    @property
    def eos_pos(self) -> np.ndarray:
        """Index of the decoder position whose target is ``<eos>``."""
        return self.q_mask.sum(axis=1) - 1


def make_batch(examples, vocab: Vocabulary) -> Batch:
    enc = [ex.encode(vocab) for ex in examples]
    B = len(enc)
    Ld = max(len(e["document"]) for e in enc)
    Lq = max(len(e["question"]) for e in enc)
    doc_ids = np.full((B, Ld), PAD, dtype=np.int64)
    dec_in = np.full((B, Lq), PAD, dtype=np.int64)
    dec_out = np.full((B, Lq), PAD, dtype=np.int64)
    for i, e in enumerate(enc):
        d, q = e["document"], e["question"]
        doc_ids[i, :len(d)] = d
        dec_out[i, :len(q)] = q
        dec_in[i, 0] = BOS
        dec_in[i, 1:len(q)] = q[:-1]
    doc_mask = np.zeros((B, Ld), dtype=bool)
    q_mask = np.zeros((B, Lq), dtype=bool)
    for i, e in enumerate(enc):
        doc_mask[i, :len(e["document"])] = True
        q_mask[i, :len(e["question"])] = True
    return Batch(
        doc_ids, doc_mask, dec_in, dec_out, q_mask,
        np.array([e["a_start"] for e in enc], dtype=np.int64),
        np.array([e["a_end"] for e in enc], dtype=np.int64),
        [ex.id for ex in examples],
    )


def unbatch(batch: Batch) -> list[dict]:
    """Strip padding; the inverse of :func:`make_batch` on encoded examples."""
    out = []
    for i in range(len(batch)):
        out.append({
            "document": batch.doc_ids[i, batch.doc_mask[i]].tolist(),
            "question": batch.dec_out[i, batch.q_mask[i]].tolist(),
            "a_start": int(batch.starts[i]),
            "a_end": int(batch.ends[i]),
        })
    return out


def iterate_batches(examples, vocab: Vocabulary, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(batch_index, Batch)``; shuffles with ``rng`` when given."""
    order = np.arange(len(examples))
    if rng is not None:
        rng.shuffle(order)
    for bi, i in enumerate(range(0, len(order), batch_size)):
        yield bi, make_batch([examples[j] for j in order[i:i + batch_size]], vocab)
