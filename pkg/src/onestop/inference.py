"""Question generation, span decoding and QA-pair extraction."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .data import BOS, EOS, window_starts
from .metrics import evaluate
from .model import OneStopModel, joint_log_score
from .numcore import Tensor, no_grad
from .transformer import EncoderOutput


@contextlib.contextmanager
def inference_mode(*models: OneStopModel):
    """Eval mode and no graph recording for the duration of the block."""
    flags = [m.training for m in models]
    for m in models:
        m.eval()
    try:
        with no_grad():
            yield
    finally:
        for m, f in zip(models, flags):
            m.train(f)


@dataclass
class GeneratedQuestion:
    ids: list[int]              # question ids without <eos>
    logprobs: list[float]       # one per emitted token, <eos> included when emitted
    q_eos: np.ndarray           # [m] decoder state at the position that emitted <eos>
    truncated: bool = False     # hit max_len without <eos>
    enc: EncoderOutput | None = field(default=None, repr=False)

    @property
    def score(self) -> float:
        return float(np.sum(self.logprobs))

    @property
    def empty(self) -> bool:
        return not self.ids


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprobs: list[float]
    finished: bool = False
    q_eos: np.ndarray | None = None

    @property
    def score(self) -> float:
        return float(np.sum(self.logprobs))

    @property
    def normalized_score(self) -> float:
        return self.score / max(len(self.logprobs), 1)


@dataclass
class QAPair:
    question: list[str]
    start: int
    end: int
    answer: list[str]
    score: float
    window_start: int = 0
    truncated: bool = False

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("span start after end")


def _log_probs(logits: Tensor) -> np.ndarray:
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _encode_single(model: OneStopModel, doc_ids) -> EncoderOutput:
    return model.encode(np.asarray([list(doc_ids)], dtype=np.int64))


def greedy_decode(model: OneStopModel, enc: EncoderOutput, max_len: int) -> GeneratedQuestion:
    state = model.start_decoding(enc, BOS)
    ids, lps = [], []
    hidden = None
    for _ in range(max_len):
        logits, hidden, state = model.decode_step(state, enc)
        lp = _log_probs(logits)[0]
        tok = int(np.argmax(lp))
        lps.append(float(lp[tok]))
        if tok == EOS:
            return GeneratedQuestion(ids, lps, hidden.data[0].copy(), False, enc)
        ids.append(tok)
        state = state.append([tok])
    return GeneratedQuestion(ids, lps, hidden.data[0].copy(), True, enc)


def beam_decode(model: OneStopModel, enc: EncoderOutput, beam_size: int, max_len: int) -> GeneratedQuestion:
    """Beam search ranked by mean token log-probability.

    Each step keeps the ``beam_size`` best unfinished continuations; an
    ``<eos>`` continuation ranked within the top ``beam_size`` moves to the
    completed pool. Search stops once the pool holds ``beam_size``
    hypotheses or ``max_len`` steps have run.
    """
    if beam_size < 1:
        raise ValueError("beam size must be >= 1")
    state = model.start_decoding(enc, BOS)
    beams = [BeamHypothesis([], [])]
    done: list[BeamHypothesis] = []
    for _ in range(max_len):
        # one document: the cross-attention mask broadcasts over beam rows
        logits, hidden, state = model.decode_step(state, enc)
        lp = _log_probs(logits)                      # [n_beams, V]
        cum = np.array([b.score for b in beams])[:, None] + lp
        flat = np.argsort(-cum, axis=None, kind="stable")
        V = lp.shape[1]
        keep_rows, keep_toks, nxt = [], [], []
        for rank, idx in enumerate(flat):
            r, tok = divmod(int(idx), V)
            if tok == EOS:
                if rank < beam_size:
                    b = beams[r]
                    done.append(BeamHypothesis(b.tokens, b.logprobs + [float(lp[r, tok])], True,
                                               hidden.data[r].copy()))
                continue
            b = beams[r]
            nxt.append(BeamHypothesis(b.tokens + [tok], b.logprobs + [float(lp[r, tok])], False,
                                      hidden.data[r].copy()))
            keep_rows.append(r)
            keep_toks.append(tok)
            if len(nxt) == beam_size:
                break
        if len(done) >= beam_size or not nxt:
            break
        beams = nxt
        state = state.select(keep_rows).append(keep_toks)
    if done:
        best = max(done, key=lambda h: h.normalized_score)  # first maximum wins ties
        return GeneratedQuestion(best.tokens, best.logprobs, best.q_eos, False, enc)
    best = max(beams, key=lambda h: h.normalized_score)
    return GeneratedQuestion(best.tokens, best.logprobs, best.q_eos, True, enc)


def generate_question(doc_ids, model: OneStopModel, beam: int | str = "greedy", max_len: int | None = None,
                      enc: EncoderOutput | None = None) -> GeneratedQuestion:
    """Decode a question from ``<bos>`` until ``<eos>`` or ``max_len`` tokens.

    ``beam`` is ``"greedy"`` or a beam size. Returns ids, per-token
    log-probabilities and q_eos (the decoder state that emitted ``<eos>``,
    or the last state when truncated).
    """
    max_len = model.cfg.max_question_len if max_len is None else min(max_len, model.cfg.max_question_len)
    with inference_mode(model):
        if enc is None:
            enc = _encode_single(model, doc_ids)
        if beam == "greedy":
            return greedy_decode(model, enc, max_len)
        return beam_decode(model, enc, int(beam), max_len)


def best_span(p_start, p_end, max_answer_len: int, length: int | None = None) -> tuple[int, int]:
    """Exact argmax of ``p_start[i] * p_end[j]`` over ``i <= j < i + max_answer_len``, both ``< length``.

    Ties resolve to the smallest ``i`` then the smallest ``j``.
    """
    ps = np.asarray(p_start, dtype=np.float64)
    pe = np.asarray(p_end, dtype=np.float64)
    n = len(ps) if length is None else length
    if n < 1:
        raise ValueError("empty document")
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    ps, pe = ps[:n], pe[:n]
    scores = ps[:, None] * pe[None, :]
    i, j = np.indices((n, n))
    valid = (j >= i) & (j - i < max_answer_len)
    scores = np.where(valid, scores, -np.inf)
    flat = int(np.argmax(scores))
    return divmod(flat, n)


def _span_probs(enc: EncoderOutput, q_eos, model: OneStopModel, max_answer_len: int):
    with inference_mode(model):
        q = q_eos if isinstance(q_eos, Tensor) else Tensor(np.asarray(q_eos), dtype=model.dtype)
        spans = model.span_logits(enc, q.reshape(1, -1))
    n = int(enc.pad_mask[0].sum())
    s, e = best_span(spans.p_start[0], spans.p_end[0], max_answer_len, n)
    return s, e, float(spans.p_start[0, s]), float(spans.p_end[0, e])


def extract_span(enc: EncoderOutput, q_eos, model: OneStopModel, max_answer_len: int = 30) -> tuple[int, int, float]:
    """Most probable valid span for one document; returns ``(start, end, log p_start + log p_end)``."""
    s, e, ps, pe = _span_probs(enc, q_eos, model, max_answer_len)
    return s, e, joint_log_score([], ps, pe)


def onestop_qa(doc_tokens, model: OneStopModel, beam: int | str = "greedy", max_len: int | None = None,
               max_answer_len: int = 30, window_start: int = 0) -> QAPair:
    """Generate one QA pair for a (sub-)document with a single model pass."""
    vocab = model.vocab
    doc_ids = vocab.encode(doc_tokens)
    gen = generate_question(doc_ids, model, beam, max_len)
    s, e, ps, pe = _span_probs(gen.enc, gen.q_eos, model, max_answer_len)
    score = joint_log_score(gen.logprobs, ps, pe)
    return QAPair(vocab.decode(gen.ids), s, e, list(doc_tokens[s:e + 1]), score, window_start, gen.truncated)


def pipeline_d2q2a(doc_tokens, qg_model: OneStopModel, span_model: OneStopModel, beam: int | str = "greedy",
                   max_len: int | None = None, max_answer_len: int = 30, window_start: int = 0) -> QAPair:
    """Two-model baseline: ``qg_model`` writes the question, ``span_model`` reads it and picks the span."""
    gen = generate_question(qg_model.vocab.encode(doc_tokens), qg_model, beam, max_len)
    question = qg_model.vocab.decode(gen.ids)
    with inference_mode(span_model):
        # a truncated question has no <eos>; its last position stands in for it, as in generation
        q_ids = span_model.vocab.encode(question) + ([] if gen.truncated else [EOS])
        enc, q_eos = span_model.question_representation(span_model.vocab.encode(doc_tokens), q_ids)
    s, e, ps, pe = _span_probs(enc, q_eos, span_model, max_answer_len)
    score = joint_log_score(gen.logprobs, ps, pe)
    return QAPair(question, s, e, list(doc_tokens[s:e + 1]), score, window_start, gen.truncated)


def generate_qa_pairs(doc_tokens, model: OneStopModel, window: int, stride: int, top_n: int,
                      beam: int | str = "greedy", max_len: int | None = None,
                      max_answer_len: int = 30) -> list[QAPair]:
    """Split a long document into windows, one QA pair per window, dedupe, keep the ``top_n`` best.

    Duplicate (question, answer) pairs keep their best score; the result is
    ordered by descending score, then window position.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    best: dict[tuple, QAPair] = {}
    for start in window_starts(len(doc_tokens), window, stride):
        sub = list(doc_tokens[start:start + window])
        pair = onestop_qa(sub, model, beam, max_len, max_answer_len, window_start=start)
        key = (tuple(pair.question), tuple(pair.answer))
        if key not in best or pair.score > best[key].score:
            best[key] = pair
    ranked = sorted(best.values(), key=lambda p: (-p.score, p.window_start))
    return ranked[:top_n]


def compare_systems(examples, onestop_model, qg_model, span_model, beam="greedy", max_len=None, max_answer_len=30):
    """Run OneStop and the two-model pipeline over ``examples``; returns both reports and deltas."""
    results = {}
    for name, run in (
        ("onestop", lambda toks: onestop_qa(toks, onestop_model, beam, max_len, max_answer_len)),
        ("pipeline", lambda toks: pipeline_d2q2a(toks, qg_model, span_model, beam, max_len, max_answer_len)),
    ):
        pairs = [run(ex.document) for ex in examples]
        results[name] = evaluate(
            [p.question for p in pairs], [ex.question for ex in examples],
            [(p.start, p.end) for p in pairs], [(ex.a_start, ex.a_end) for ex in examples],
        )
    delta = {}
    for key in ("bleu1", "bleu2", "rouge1", "rouge2", "rougeL", "span_em", "span_f1"):
        delta[key] = getattr(results["onestop"], key) - getattr(results["pipeline"], key)
    return results["onestop"], results["pipeline"], delta
