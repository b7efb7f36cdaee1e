"""Desk-scale generative retrieval over SID token streams.

Items are addressed by their SID tokens, so retrieval is sequence generation:
a scorer assigns next-token probabilities level by level, a beam search whose
width grows per level decodes the most probable SIDs, and each decoded SID
expands to the items currently holding it.  The scorer here is a count-based
Markov model, a deliberately small stand-in exposing the same interface a
billion-parameter sequence model would.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .catalog import SemanticId, SidStructure, flat_tokens_to_sid, sid_to_flat_tokens
from .collision import AssignmentTable
from .errors import DataError

logger = logging.getLogger(__name__)

SENTINEL = -100
DEFAULT_ALPHA = 0.1
DEFAULT_K_LIST = (20, 100, 500, 1000)


class SequenceScorer:
    """Interface every retrieval scorer implements.

    next_token_log_probs(context) returns log-probabilities over the token
    band of the NEXT level (index within the band = the level code), inferred
    from the context length mod m.  The entries exponentiate-and-sum to 1.
    """

    structure: SidStructure

    def next_token_log_probs(self, context) -> np.ndarray:
        raise NotImplementedError


class MarkovScorer(SequenceScorer):
    """Count-based scorer: condition on the last `order` tokens, smooth with
    add-alpha over the next level's band."""

    def __init__(self, structure: SidStructure, order: int = 2, alpha: float = DEFAULT_ALPHA):
        if order < 1:
            raise ValueError("order must be >= 1")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.structure = structure
        self.order = int(order)
        self.alpha = float(alpha)
        self._counts: dict[tuple[int, ...], dict[int, int]] = {}

    def observe(self, stream) -> None:
        """Accumulate (context, next-token) counts from one flat-token stream."""
        tokens = _validated_stream(stream, self.structure)
        for pos, token in enumerate(tokens):
            key = tuple(tokens[max(0, pos - self.order) : pos])
            slot = self._counts.setdefault(key, {})
            slot[token] = slot.get(token, 0) + 1

    def next_token_log_probs(self, context) -> np.ndarray:
        context = [int(t) for t in context]
        for t in context:
            if not 0 <= t < self.structure.total_tokens:
                raise DataError(f"token {t} outside the structure's token space")
        level = len(context) % self.structure.num_levels
        offset = self.structure.offsets[level]
        band = self.structure.level_sizes[level]
        slot = self._counts.get(tuple(context[-self.order :]), {})
        counts = np.zeros(band)
        for token, count in slot.items():
            if offset <= token < offset + band:
                counts[token - offset] = count
        probs = (counts + self.alpha) / (counts.sum() + self.alpha * band)
        return np.log(probs)


def _validated_stream(stream, structure: SidStructure) -> list[int]:
    tokens = [int(t) for t in stream]
    m = structure.num_levels
    for pos, token in enumerate(tokens):
        level = pos % m
        offset = structure.offsets[level]
        if not offset <= token < offset + structure.level_sizes[level]:
            raise DataError(
                f"token {token} at position {pos} is outside level {level}'s band"
            )
    if len(tokens) % m != 0:
        raise DataError("stream length must be a whole number of SIDs")
    return tokens


def train_markov_scorer(
    streams,
    structure: SidStructure,
    order: int = 2,
    alpha: float = DEFAULT_ALPHA,
) -> MarkovScorer:
    """Count every (context, next token) pair across the corpus."""
    scorer = MarkovScorer(structure, order=order, alpha=alpha)
    for stream in streams:
        scorer.observe(stream)
    return scorer


# ---------------------------------------------------------------------------
# Training losses


@dataclass(frozen=True)
class LabeledSequence:
    """Token stream with a parallel label row; -100 marks unscored positions."""

    tokens: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "labels", tuple(int(t) for t in self.labels))
        if len(self.tokens) != len(self.labels):
            raise ValueError("tokens and labels must have equal length")
        if not any(label >= 0 for label in self.labels):
            raise ValueError("a labeled sequence needs at least one scored position")


def labeled_from_stream(stream, scored_from: int) -> LabeledSequence:
    """Score positions from index `scored_from` on; mask everything before."""
    tokens = tuple(int(t) for t in stream)
    labels = tuple(
        SENTINEL if pos < scored_from else tok for pos, tok in enumerate(tokens)
    )
    return LabeledSequence(tokens, labels)


def rec_loss(scorer: SequenceScorer, example: LabeledSequence) -> float:
    """Mean negative log-probability over the scored positions.

    The label at position t is predicted from tokens[:t], so labels normally
    copy the tokens with the unscored prefix replaced by the sentinel.
    """
    total, scored = 0.0, 0
    structure = scorer.structure
    for pos, label in enumerate(example.labels):
        if label < 0:
            continue
        level = pos % structure.num_levels
        offset = structure.offsets[pos % structure.num_levels]
        if not offset <= label < offset + structure.level_sizes[level]:
            raise DataError(f"label {label} at position {pos} is outside level {level}'s band")
        log_probs = scorer.next_token_log_probs(example.tokens[:pos])
        total += -float(log_probs[label - offset])
        scored += 1
    if scored == 0:
        raise DataError("no scorable position")
    return total / scored


@dataclass(frozen=True)
class SlicePlan:
    """Where batched scoring may start without dropping any scored position."""

    first_non_neg: int
    logits_to_keep: int


def slice_plan(label_rows) -> SlicePlan:
    """Earliest scored index across rows, and how many tail positions to keep.

    logits_to_keep = seq_len - first_non_neg + 1, capped at seq_len; every
    label before the kept window is the sentinel in every row, so scoring
    only the window loses nothing.
    """
    rows = [list(row) for row in label_rows]
    if not rows:
        raise DataError("empty label batch")
    seq_len = len(rows[0])
    first = seq_len
    for i, row in enumerate(rows):
        if len(row) != seq_len:
            raise DataError("label rows must share one length")
        non_neg = [pos for pos, label in enumerate(row) if label >= 0]
        if not non_neg:
            raise DataError(f"label row {i} has no scored position")
        first = min(first, non_neg[0])
    return SlicePlan(first_non_neg=first, logits_to_keep=min(seq_len - first + 1, seq_len))


def masked_batch_loss(scorer: SequenceScorer, examples) -> float:
    """Full-length masked loss: every position visited, sentinels skipped."""
    total, scored = 0.0, 0
    for example in examples:
        for pos, label in enumerate(example.labels):
            if label < 0:
                continue
            level = pos % scorer.structure.num_levels
            offset = scorer.structure.offsets[level]
            log_probs = scorer.next_token_log_probs(example.tokens[:pos])
            total += -float(log_probs[label - offset])
            scored += 1
    if scored == 0:
        raise DataError("no scorable position")
    return total / scored


def sliced_loss(scorer: SequenceScorer, examples) -> float:
    """masked_batch_loss computed only over the slice_plan window.

    Skipping the shared sentinel prefix is the whole trick; the result equals
    the full-length masked loss exactly.
    """
    examples = list(examples)
    plan = slice_plan([ex.labels for ex in examples])
    seq_len = len(examples[0].labels)
    start = seq_len - plan.logits_to_keep
    total, scored = 0.0, 0
    for example in examples:
        for pos in range(max(start, 0), seq_len):
            label = example.labels[pos]
            if label < 0:
                continue
            level = pos % scorer.structure.num_levels
            offset = scorer.structure.offsets[level]
            log_probs = scorer.next_token_log_probs(example.tokens[:pos])
            total += -float(log_probs[label - offset])
            scored += 1
    if scored == 0:
        raise DataError("no scorable position")
    return total / scored


# ---------------------------------------------------------------------------
# Beam search


@dataclass(frozen=True)
class BeamSchedule:
    """Per-level beam widths, e.g. (300, 600, 1200): the beam widens as the
    SID space fans out."""

    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("beam widths must be positive")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            logger.warning("beam widths %s decrease between levels", self.widths)

    def validate(self, structure: SidStructure) -> "BeamSchedule":
        if len(self.widths) != structure.num_levels:
            raise DataError(
                f"schedule has {len(self.widths)} widths for {structure.num_levels} levels"
            )
        return self


def default_schedule(structure: SidStructure) -> BeamSchedule:
    """The production defaults for 2- and 3-level structures; doubling from
    300 (capped at 1200) otherwise."""
    m = structure.num_levels
    if m == 3:
        return BeamSchedule((300, 600, 1200))
    if m == 2:
        return BeamSchedule((600, 1200))
    return BeamSchedule(tuple(min(300 * 2**j, 1200) for j in range(m)))


def dynamic_beam_search(
    scorer: SequenceScorer,
    context,
    schedule: BeamSchedule,
    k: int,
) -> list[tuple[SemanticId, float]]:
    """Top-k SIDs by exact cumulative log-probability.

    Level j keeps the widths[j] best partial sequences; equal scores order by
    token tuple.  The returned log-probs are plain sums of scorer outputs, so
    with widths covering the full vocabulary this is exhaustive enumeration.
    """
    structure = scorer.structure
    schedule.validate(structure)
    if k > schedule.widths[-1]:
        raise DataError(f"k={k} exceeds the final beam width {schedule.widths[-1]}")
    context = tuple(int(t) for t in context)
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for level, width in enumerate(schedule.widths):
        band = structure.level_sizes[level]
        offset = structure.offsets[level]
        scores = np.empty(len(beams) * band)
        tokens = np.empty((len(beams) * band, level + 1), dtype=np.int64)
        for i, (logp, partial) in enumerate(beams):
            step = scorer.next_token_log_probs(context + partial)
            rows = slice(i * band, (i + 1) * band)
            scores[rows] = logp + step
            tokens[rows, : level] = partial
            tokens[rows, level] = np.arange(band) + offset
        # primary key: descending score; then token columns left to right
        keys = tuple(tokens[:, j] for j in reversed(range(level + 1))) + (-scores,)
        order = np.lexsort(keys)[:width]
        beams = [(float(scores[i]), tuple(int(t) for t in tokens[i])) for i in order]
    return [
        (flat_tokens_to_sid(tokens, structure), logp) for logp, tokens in beams[:k]
    ]


# ---------------------------------------------------------------------------
# Evaluation and corpus building


def sequence_context(table: AssignmentTable, history) -> list[int]:
    """Concatenated flat tokens of the history items' SIDs, oldest first."""
    context: list[int] = []
    for item_id in history:
        context.extend(sid_to_flat_tokens(table[item_id], table.structure))
    return context


def evaluate_hr(
    scorer: SequenceScorer,
    table: AssignmentTable,
    sequences,
    schedule: BeamSchedule,
    k_list=DEFAULT_K_LIST,
) -> dict[int, float]:
    """HR@K over interaction sequences, one decode per sequence.

    The beam decodes the top widths[-1] SIDs from the history context; each
    SID expands to all items currently assigned to it (ascending item id) and
    the expansion is truncated at K.  A sequence contributes the fraction of
    its clicked items found in that top-K list.
    """
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise DataError("K values must be positive")
    sequences = list(sequences)
    if not sequences:
        raise DataError("no sequences to evaluate")
    totals = {k: 0.0 for k in k_list}
    max_k = k_list[-1]
    for seq in sequences:
        if not seq.targets:
            raise DataError(f"sequence {seq.pv_id!r} has no clicked targets")
        context = sequence_context(table, seq.history)
        decoded = dynamic_beam_search(scorer, context, schedule, k=schedule.widths[-1])
        retrieved: list[str] = []
        for sid, _ in decoded:
            retrieved.extend(table.items_for_sid(sid))
            if len(retrieved) >= max_k:
                break
        clicked = set(seq.targets)
        for item_id in clicked:
            table[item_id]  # unmapped target is a data error, not a zero
        for k in k_list:
            hits = len(set(retrieved[:k]) & clicked)
            totals[k] += hits / len(clicked)
    return {k: totals[k] / len(sequences) for k in k_list}


def build_useraction_corpus(sequences, table: AssignmentTable) -> list[list[int]]:
    """One flat-token stream per page view: history then targets, in order.

    No instruction tokens, no separators; the stream is exactly the SIDs of
    the interacted items, which is what autoregressive pretraining consumes.
    """
    corpus = []
    for seq in sequences:
        stream: list[int] = []
        for item_id in list(seq.history) + list(seq.targets):
            stream.extend(sid_to_flat_tokens(table[item_id], table.structure))
        corpus.append(stream)
    return corpus


# ---------------------------------------------------------------------------
# File formats


def save_corpus(corpus, path) -> None:
    """One stream per line, comma-separated flat tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for stream in corpus:
            fh.write(",".join(str(int(t)) for t in stream) + "\n")


def load_corpus(path) -> list[list[int]]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                corpus.append([int(t) for t in line.split(",")])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return corpus


def save_markov_scorer(scorer: MarkovScorer, path) -> None:
    """Header (order, alpha, structure) then one count row per (context, next)."""
    structure = scorer.structure
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#order\t{scorer.order}\n")
        fh.write(f"#alpha\t{repr(scorer.alpha)}\n")
        fh.write("#levels\t" + "\t".join(str(n) for n in structure.level_sizes) + "\n")
        fh.write(f"#code_dim\t{structure.code_dim}\n")
        for key in sorted(scorer._counts):
            slot = scorer._counts[key]
            ctx = ",".join(str(t) for t in key)
            for token in sorted(slot):
                fh.write(f"{ctx}\t{token}\t{slot[token]}\n")


def load_markov_scorer(path) -> MarkovScorer:
    header: dict[str, list[str]] = {}
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if parts[0].startswith("#"):
                header[parts[0][1:]] = parts[1:]
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected context, token, count")
            try:
                key = tuple(int(t) for t in parts[0].split(",")) if parts[0] else ()
                counts.setdefault(key, {})[int(parts[1])] = int(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    try:
        structure = SidStructure(
            tuple(int(n) for n in header["levels"]), code_dim=int(header["code_dim"][0])
        )
        scorer = MarkovScorer(
            structure, order=int(header["order"][0]), alpha=float(header["alpha"][0])
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"malformed scorer header in {path}: {exc}") from exc
    scorer._counts = counts
    return scorer
