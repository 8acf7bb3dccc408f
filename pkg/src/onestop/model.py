"""The joint question-generation / answer-extraction model and its loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import BOS, Batch, Example, Vocabulary, make_batch
from .numcore import Tensor, cross_entropy, log_softmax
from .transformer import (
    Decoder,
    DecoderState,
    Encoder,
    EncoderOutput,
    Initializer,
    Module,
    ModelConfig,
    Runtime,
)


def joint_objective(phi_lm, phi_start, phi_end, lam: float):
    """``lam * phi_lm + (1 - lam) * (phi_start + phi_end)``; works on floats and Tensors.

    ``lam = 1`` leaves only the question-generation loss and ``lam = 0`` only
    the span losses.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return phi_lm * lam + (phi_start + phi_end) * (1.0 - lam)


@dataclass
class LossBreakdown:
    phi_lm: float
    phi_start: float
    phi_end: float
    phi_total: float
    lam: float
    objective: Tensor | None = None  # graph node for backward; never serialised

    def to_json(self, step: int | None = None) -> dict:
        out = {} if step is None else {"step": step}
        out.update(phi_lm=self.phi_lm, phi_start=self.phi_start, phi_end=self.phi_end,
                   phi_total=self.phi_total, **{"lambda": self.lam})
        return out


@dataclass
class SpanDistributions:
    p_start: np.ndarray  # [B, L]; zero on pad positions
    p_end: np.ndarray
    log_start: Tensor    # [B, L] log-probabilities (graph nodes during training)
    log_end: Tensor


def joint_log_score(q_token_logprobs, p_start_at_astart: float, p_end_at_aend: float) -> float:
    """log P(q|d) + log P(a|d,q) for ranking QA pairs; zero probabilities give ``-inf``."""
    total = float(np.sum(q_token_logprobs))
    for p in (p_start_at_astart, p_end_at_aend):
        if p <= 0.0:
            return -math.inf
        total += math.log(p)
    return total


class OneStopModel(Module):
    """Encoder-decoder transformer with a tied LM head and a bilinear span head.

    Parameters: token embedding ``[V, m]`` shared by encoder input, decoder
    input and LM output; learned positions; encoder and decoder stacks; an
    LM output bias; span matrices ``w_start`` and ``w_end`` ``[m, m]``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        init = Initializer(rng, cfg.init_std)
        self.rt = Runtime(cfg.dropout, np.random.default_rng(rng.integers(2**63)))
        self.embed = init.normal((cfg.vocab_size, cfg.d_model))
        self.encoder = Encoder(cfg, self.embed, init, self.rt)
        self.decoder = Decoder(cfg, self.embed, init, self.rt)
        self.lm_bias = init.zeros((cfg.vocab_size,))
        self.w_start = init.normal((cfg.d_model, cfg.d_model))
        self.w_end = init.normal((cfg.d_model, cfg.d_model))
        self.encoder_calls = 0

    # -- mode / dtype ------------------------------------------------------------

    def train(self, mode: bool = True) -> "OneStopModel":
        self.rt.training = mode
        return self

    def eval(self) -> "OneStopModel":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.rt.training

    def astype(self, dtype) -> "OneStopModel":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.embed.dtype

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    # -- forward pieces ---------------------------------------------------------------

    def encode(self, doc_ids, pad_mask=None) -> EncoderOutput:
        self.encoder_calls += 1
        return self.encoder(doc_ids, pad_mask)

    def decode(self, dec_ids, enc: EncoderOutput) -> Tensor:
        return self.decoder(dec_ids, enc)

    def lm_logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.embed.T + self.lm_bias

    def start_decoding(self, enc: EncoderOutput, bos_id: int) -> DecoderState:
        return self.decoder.start(enc, bos_id)

    def decode_step(self, state: DecoderState, enc: EncoderOutput):
        """One incremental step: returns ``(logits [B, V], hidden [B, m], state)``."""
        hidden, state = self.decoder.step(state, enc)
        return self.lm_logits(hidden), hidden, state

    def span_logits(self, enc: EncoderOutput, q_eos: Tensor) -> SpanDistributions:
        """Bilinear start/end distributions ``softmax_i(D_i W q_eos)`` over non-pad positions."""
        B, L, m = enc.states.shape
        mask = enc.pad_mask
        if not mask.any(axis=1).all():
            raise ValueError("document has no non-pad position")
        q = q_eos.reshape(B, m)
        out = []
        for w in (self.w_start, self.w_end):
            u = (q @ w.T).reshape(B, m, 1)          # rows of W q_eos
            scores = (enc.states @ u).reshape(B, L)
            out.append(log_softmax(scores, mask))
        ls, le = out
        p_start = np.where(mask, np.exp(ls.data), 0.0)
        p_end = np.where(mask, np.exp(le.data), 0.0)
        return SpanDistributions(p_start, p_end, ls, le)

    def forward_train(self, batch: Batch | Example, lam: float):
        """Teacher-forced pass computing the joint loss.

        Returns ``(LossBreakdown, SpanDistributions, lm_logits)``. Losses are
        combined per example and averaged over the batch; ``phi_lm`` sums over
        question positions (including ``<eos>``).
        """
        if isinstance(batch, Example):
            batch = make_batch([batch], self.vocab)
        B, Ld = batch.doc_ids.shape
        if (batch.starts < 0).any() or (batch.ends >= batch.doc_mask.sum(axis=1)).any() or (batch.starts > batch.ends).any():
            raise ValueError("answer span outside the document")
        enc = self.encode(batch.doc_ids, batch.doc_mask)
        hidden = self.decode(batch.dec_in, enc)
        logits = self.lm_logits(hidden)
        lm_per_pos = cross_entropy(logits, batch.dec_out, mask=batch.q_mask, reduction="none")
        lm_per_ex = lm_per_pos.sum(axis=1)

        rows = np.arange(B)
        q_eos = hidden[rows, batch.eos_pos]
        spans = self.span_logits(enc, q_eos)
        start_per_ex = -spans.log_start[rows, batch.starts]
        end_per_ex = -spans.log_end[rows, batch.ends]

        phi_lm = lm_per_ex.mean()
        phi_start = start_per_ex.mean()
        phi_end = end_per_ex.mean()
        objective = joint_objective(phi_lm, phi_start, phi_end, lam)
        lm_f, s_f, e_f = float(phi_lm.data), float(phi_start.data), float(phi_end.data)
        breakdown = LossBreakdown(lm_f, s_f, e_f, joint_objective(lm_f, s_f, e_f, lam), lam, objective)
        return breakdown, spans, logits

    def question_representation(self, doc_ids, question_ids) -> tuple[EncoderOutput, Tensor]:
        """Encode a document and force-decode a question; returns the encoder output and q_eos.

        ``question_ids`` must end with ``<eos>``; q_eos is the decoder state at
        the position that predicts it.
        """
        q = list(question_ids)
        enc = self.encode(np.asarray([doc_ids]))
        dec_in = np.asarray([[BOS] + q[:-1]])
        hidden = self.decode(dec_in, enc)
        return enc, hidden[0, len(q) - 1]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

