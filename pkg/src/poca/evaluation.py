"""Caption-quality measurement.

Two evaluation families live here.  VQA-from-caption: a text-only model
answers questions given only a caption, and answer accuracy (exact-match
after normalization, optionally NLI-judged) estimates how much
task-relevant information the caption retained.  Paragraph metrics: an
exact-unigram METEOR against reference paragraphs and an embedding
cosine score against the image itself, plus word-count statistics
comparing default and merged captions.
"""

from __future__ import annotations

import json
import math
import unicodedata
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from poca.backends import (
    ChatMessage,
    Client,
    ContentError,
    DEFAULT_REFUSAL_PHRASES,
    NliLabel,
)
from poca.prompts import (
    NO_CAPTION_SYSTEM,
    NO_CAPTION_USER_TEMPLATE,
    VQA_ASSISTANT_PREFIX,
    VQA_SYSTEM,
    VQA_USER_TEMPLATE,
)

__all__ = [
    "VQAItem",
    "AnswerRecord",
    "MetricReport",
    "render_vqa_prompt",
    "render_no_caption_prompt",
    "normalize_answer",
    "exact_match",
    "nli_match",
    "meteor_exact",
    "clip_score",
    "length_stats",
    "pearson",
    "evaluate_vqa",
    "read_vqa_manifest",
]

_ARTICLES = ("a", "an", "the")
_TERMINAL_PUNCT = ".,!?"
#: Alignments with at most this many matched tokens are chunk-minimized
#: exhaustively; larger ones fall back to a greedy left-to-right pass.
_EXHAUSTIVE_MATCH_LIMIT = 12


@dataclass(frozen=True)
class VQAItem:
    """One question about one image, with its acceptable answers."""

    image_id: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        answers = tuple(self.answers)
        if not answers or any(not a.strip() for a in answers):
            raise ValueError("ground-truth answers must be non-empty")
        object.__setattr__(self, "answers", answers)


@dataclass(frozen=True)
class AnswerRecord:
    """Outcome of answering one VQA item from a caption."""

    image_id: str
    question: str
    generated: str
    exact: bool
    refused: bool
    nli_label: str | None = None
    nli_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "question": self.question,
            "generated": self.generated,
            "exact_match": self.exact,
            "refused": self.refused,
            "nli_label": self.nli_label,
            "nli_error": self.nli_error,
        }


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics for one evaluated caption set."""

    exact_accuracy: float | None = None
    nli_accuracy: float | None = None
    mean_answer_length: float | None = None
    caption_length_default: float | None = None
    caption_length_poca: float | None = None
    delta_length: float | None = None
    meteor: float | None = None
    clip_score: float | None = None

    def __post_init__(self):
        for name in ("exact_accuracy", "nli_accuracy"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_dict(self) -> dict:
        return {
            "exact_accuracy": self.exact_accuracy,
            "nli_accuracy": self.nli_accuracy,
            "mean_answer_length": self.mean_answer_length,
            "caption_length_default": self.caption_length_default,
            "caption_length_poca": self.caption_length_poca,
            "delta_length": self.delta_length,
            "meteor": self.meteor,
            "clip_score": self.clip_score,
        }


def render_vqa_prompt(caption: str, question: str) -> list[ChatMessage]:
    """Messages asking a text-only model to answer from a caption."""
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    if not question.strip():
        raise ValueError("question must be non-empty")
    return [
        ChatMessage("system", VQA_SYSTEM),
        ChatMessage("user", VQA_USER_TEMPLATE.format(caption=caption, question=question)),
        ChatMessage("assistant", VQA_ASSISTANT_PREFIX),
    ]


def render_no_caption_prompt(question: str) -> list[ChatMessage]:
    """Messages for the caption-free guessing baseline."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    return [
        ChatMessage("system", NO_CAPTION_SYSTEM),
        ChatMessage("user", NO_CAPTION_USER_TEMPLATE.format(question=question)),
        ChatMessage("assistant", VQA_ASSISTANT_PREFIX),
    ]


def normalize_answer(text: str) -> str:
    """Normalize an answer for exact matching.

    Lowercase, NFC, outer whitespace and terminal punctuation stripped,
    internal whitespace collapsed, and a single leading article dropped.
    """
    text = unicodedata.normalize("NFC", text).lower().strip()
    text = text.rstrip(_TERMINAL_PUNCT)
    text = " ".join(text.split())
    first, _, rest = text.partition(" ")
    if first in _ARTICLES and rest:
        text = rest
    return text


def exact_match(generated: str, truths: Sequence[str]) -> bool:
    """Whether the generated answer normalizes to any ground-truth answer."""
    if not truths:
        raise ValueError("ground-truth answers must be non-empty")
    norm = normalize_answer(generated)
    return any(norm == normalize_answer(t) for t in truths)


def nli_match(generated: str, truth: str, judge: Client) -> bool:
    """Semantic-level answer check via a three-way entailment judge.

    Both answers are wrapped in "The answer to this question is ..."
    statements; only an entailment verdict counts as correct.
    """
    label = judge.nli_judge(
        premise=f"The answer to this question is {truth}",
        hypothesis=f"The answer to this question is {generated}",
    )
    return label is NliLabel.ENTAILMENT


# -- METEOR (exact-unigram stage) ---------------------------------------------


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for c, r in pairs:
        if prev is None or c != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (c, r)
    return chunks


def _min_chunks_exhaustive(cand: list[str], ref: list[str], total: int) -> int:
    """Fewest chunks over all maximum one-to-one exact alignments."""
    positions: dict[str, list[int]] = {}
    for idx, tok in enumerate(ref):
        positions.setdefault(tok, []).append(idx)
    # upper bound on matches obtainable from each candidate suffix
    suffix = [0] * (len(cand) + 1)
    for i in range(len(cand) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + (1 if cand[i] in positions else 0)

    best = total + 1

    def walk(i: int, used: set[int], matched: int, chunks: int, prev: tuple | None):
        nonlocal best
        if chunks >= best:
            return
        if matched + suffix[i] < total:
            return
        if i == len(cand):
            if matched == total:
                best = min(best, chunks)
            return
        tok = cand[i]
        for r in positions.get(tok, ()):
            if r in used:
                continue
            extends = prev is not None and i == prev[0] + 1 and r == prev[1] + 1
            used.add(r)
            walk(i + 1, used, matched + 1, chunks + (0 if extends else 1), (i, r))
            used.remove(r)
        walk(i + 1, used, matched, chunks, prev)

    walk(0, set(), 0, 0, None)
    return best


def _chunks_greedy(cand: list[str], ref: list[str]) -> int:
    """Greedy left-to-right alignment: continue the current chunk when
    possible, otherwise take the leftmost unused reference position."""
    positions: dict[str, list[int]] = {}
    for idx, tok in enumerate(ref):
        positions.setdefault(tok, []).append(idx)
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    prev_r = None
    for i, tok in enumerate(cand):
        cands = [r for r in positions.get(tok, ()) if r not in used]
        if not cands:
            continue
        if (
            prev_r is not None
            and pairs
            and pairs[-1][0] == i - 1
            and prev_r + 1 in cands
        ):
            r = prev_r + 1
        else:
            r = cands[0]
        used.add(r)
        pairs.append((i, r))
        prev_r = r
    return _chunk_count(pairs)


def _meteor_single(cand: list[str], ref: list[str]) -> float:
    counts: dict[str, int] = {}
    for tok in ref:
        counts[tok] = counts.get(tok, 0) + 1
    matches = 0
    remaining = dict(counts)
    for tok in cand:
        if remaining.get(tok, 0) > 0:
            remaining[tok] -= 1
            matches += 1
    if matches == 0:
        return 0.0
    if matches <= _EXHAUSTIVE_MATCH_LIMIT:
        chunks = _min_chunks_exhaustive(cand, ref, matches)
    else:
        chunks = _chunks_greedy(cand, ref)
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_exact(candidate: str, references: Sequence[str]) -> float:
    """Exact-unigram METEOR: best score over the references.

    Unigrams are lowercased whitespace tokens; the alignment maximizes
    matches and then minimizes the number of contiguous chunks
    (exhaustively up to 12 matches, greedily beyond).  Stemming and
    synonym stages are deliberately not implemented.
    """
    if not candidate.strip():
        raise ValueError("candidate must be non-empty")
    if not references or any(not r.strip() for r in references):
        raise ValueError("references must be non-empty")
    cand = candidate.lower().split()
    return max(_meteor_single(cand, r.lower().split()) for r in references)


def clip_score(image_vec: np.ndarray, text_vec: np.ndarray) -> float:
    """Reference-free caption score: 2.5 * max(cosine similarity, 0)."""
    a = np.asarray(image_vec, dtype=np.float64).reshape(-1)
    b = np.asarray(text_vec, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    for name, v in (("image", a), ("text", b)):
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError(f"{name} embedding is the zero vector")
        if abs(norm - 1.0) > 1e-6:
            warnings.warn(f"renormalizing non-unit {name} embedding (norm={norm:.6g})")
            v /= norm
    return 2.5 * max(float(np.dot(a, b)), 0.0)


def length_stats(
    default_captions: Sequence[str], poca_captions: Sequence[str]
) -> tuple[float, float, float]:
    """Mean word counts of both caption sets and their difference.

    Means are reported to 0.1 precision; the delta is computed from the
    raw means before rounding.
    """
    if not default_captions or not poca_captions:
        raise ValueError("caption lists must be non-empty")
    mean_default = sum(len(c.split()) for c in default_captions) / len(default_captions)
    mean_poca = sum(len(c.split()) for c in poca_captions) / len(poca_captions)
    return (
        round(mean_default, 1),
        round(mean_poca, 1),
        round(mean_poca - mean_default, 1),
    )


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ValueError("need at least two points")
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("inputs must have nonzero variance")
    return cov / math.sqrt(vx * vy)


# -- VQA evaluation drivers ----------------------------------------------------


def read_vqa_manifest(path) -> list[VQAItem]:
    """Read a VQA manifest JSONL: {image_id, question, answers[]}."""
    items = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), 1
    ):
        if not line.strip():
            continue
        obj = json.loads(line)
        unknown = set(obj) - {"image_id", "question", "answers"}
        if unknown:
            raise ValueError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        items.append(
            VQAItem(
                image_id=obj["image_id"],
                question=obj["question"],
                answers=tuple(obj["answers"]),
            )
        )
    return items


def answer_from_caption(caption: str, question: str, answerer: Client):
    """One QA turn: render the prompt, complete, prefix-strip the answer."""
    messages = render_vqa_prompt(caption, question)
    return answerer.chat_complete(
        messages[:-1], assistant_prefix=VQA_ASSISTANT_PREFIX
    )


def evaluate_vqa(
    captions_by_image: dict[str, str],
    items: Sequence[VQAItem],
    answerer: Client,
    nli_judge: Client | None = None,
    default_captions: Sequence[str] | None = None,
    poca_captions: Sequence[str] | None = None,
) -> tuple[MetricReport, list[AnswerRecord]]:
    """Answer every VQA item from its image's caption and score the answers.

    Refused answers count as incorrect.  NLI runs only when a judge is
    supplied; items whose judgment fails to parse are recorded with an
    error and excluded from the NLI denominator.  The optional caption
    lists populate the length columns of the report.
    """
    records: list[AnswerRecord] = []
    for item in items:
        caption = captions_by_image.get(item.image_id)
        if caption is None:
            raise KeyError(f"no caption for image {item.image_id!r}")
        completion = answer_from_caption(caption, item.question, answerer)
        correct = (not completion.refused) and exact_match(
            completion.text, item.answers
        )
        nli_label = None
        nli_error = None
        if nli_judge is not None:
            try:
                label = nli_judge.nli_judge(
                    premise=f"The answer to this question is {item.answers[0]}",
                    hypothesis=f"The answer to this question is {completion.text}",
                )
                nli_label = label.value
            except ContentError as exc:
                nli_error = str(exc)
        records.append(
            AnswerRecord(
                image_id=item.image_id,
                question=item.question,
                generated=completion.text,
                exact=correct,
                refused=completion.refused,
                nli_label=nli_label,
                nli_error=nli_error,
            )
        )

    exact_accuracy = (
        sum(r.exact for r in records) / len(records) if records else 0.0
    )
    nli_accuracy = None
    if nli_judge is not None:
        judged = [r for r in records if r.nli_label is not None]
        if judged:
            nli_accuracy = sum(
                r.nli_label == NliLabel.ENTAILMENT.value and not r.refused
                for r in judged
            ) / len(judged)
    mean_answer_length = (
        sum(len(r.generated.split()) for r in records) / len(records)
        if records
        else 0.0
    )
    length_default = length_poca = delta = None
    if default_captions and poca_captions:
        length_default, length_poca, delta = length_stats(
            default_captions, poca_captions
        )
    report = MetricReport(
        exact_accuracy=exact_accuracy,
        nli_accuracy=nli_accuracy,
        mean_answer_length=round(mean_answer_length, 2),
        caption_length_default=length_default,
        caption_length_poca=length_poca,
        delta_length=delta,
    )
    return report, records
