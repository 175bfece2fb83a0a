"""Scenario classification, metrics, judges, and the evaluation driver.

Open-book evaluation retrieves context for each question, classifies the
record by what came back relative to its golden chunk, prompts the model
with the retrieved text, and routes the response to the scenario's
metric: consistency scoring for golden-only retrieval, distractor
filtering for mixed retrieval, refusal rate for wrong-context retrieval.
Records whose retrieval is empty fall back to the closed-book prompt and
contribute to recall accuracy only. Recall accuracy itself is averaged
over every response in the mode, refusals included.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import prompts
from .curation import GeneratorClient, HttpChatClient, _parse_json_object
from .errors import ConfigError, EvaluationError, FormatError
from .numerics import cosine_similarity
from .retrieval import CorpusIndex, Embedder, RetrievalConfig

DEFAULT_REFUSAL_PHRASES = ("i don't know", "i do not know")


class Scenario(Enum):
    GOLDEN_CONTEXT = "golden_context"
    MIXED_CONTEXT = "mixed_context"
    IRRELEVANT_CONTEXT = "irrelevant_context"
    EMPTY_CONTEXT = "empty_context"


def classify_scenario(retrieved: Sequence[str], golden_id: str) -> Scenario:
    """Partition retrieval outcomes relative to the record's golden chunk."""
    ids = list(retrieved)
    if not ids:
        return Scenario.EMPTY_CONTEXT
    if golden_id not in ids:
        return Scenario.IRRELEVANT_CONTEXT
    if len(ids) == 1:
        return Scenario.GOLDEN_CONTEXT
    return Scenario.MIXED_CONTEXT


def _normalize(text: str) -> str:
    cleaned = "".join(c for c in text.lower() if c not in string.punctuation)
    return " ".join(cleaned.split())


def detect_refusal(response: str,
                   phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES) -> bool:
    """True when the normalized response starts with a refusal phrase."""
    norm = _normalize(response)
    return any(norm.startswith(_normalize(p)) for p in phrases)


def compute_rr(responses: Iterable[str],
               phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES
               ) -> float | None:
    """Fraction of responses that refuse; None when there are no responses."""
    responses = list(responses)
    if not responses:
        return None
    refused = sum(1 for r in responses if detect_refusal(r, phrases))
    return refused / len(responses)


def statement_f1(answer: str, truth: str) -> tuple[int, int, int, float]:
    """Token-multiset overlap F1 between an answer and the reference.

    Tokens are lowercased with punctuation stripped. Returns
    (tp, fp, fn, f1); two answers that both normalize to nothing count
    as a perfect match.
    """
    a = Counter(_normalize(answer).split())
    t = Counter(_normalize(truth).split())
    tp = sum((a & t).values())
    fp = sum((a - t).values())
    fn = sum((t - a).values())
    if tp + fp + fn == 0:
        return 0, 0, 0, 1.0
    return tp, fp, fn, tp / (tp + 0.5 * (fp + fn))


@dataclass(frozen=True)
class RaWeights:
    token_weight: float = 1.0
    embedding_weight: float = 1.0

    def __post_init__(self):
        if self.token_weight < 0 or self.embedding_weight < 0:
            raise ConfigError("metric weights must be non-negative")
        if self.token_weight + self.embedding_weight == 0:
            raise ConfigError("at least one metric weight must be positive")


def compute_ra(answer: str, truth: str, weights: RaWeights,
               embedder: Embedder) -> float:
    """Recall accuracy: weighted mean of token F1 and embedding cosine.

    The cosine term is clamped into [0, 1] before weighting, so the
    result always lies in [0, 1]. An answer that normalizes to nothing
    scores zero on the embedding term rather than erroring.
    """
    _, _, _, f1 = statement_f1(answer, truth)
    if answer.strip() and truth.strip():
        cos = cosine_similarity(embedder.embed(answer), embedder.embed(truth))
    else:
        cos = 0.0
    cos = min(max(cos, 0.0), 1.0)
    w = weights
    return (f1 * w.token_weight + cos * w.embedding_weight) / (
        w.token_weight + w.embedding_weight)


def compute_qr(question: str, response: str, context: str | None,
               gen: GeneratorClient, embedder: Embedder, m: int = 1) -> float:
    """Question recall: how close questions regenerated from the response
    come to the original question.

    The regeneration reuses the question template with the response (and
    retrieved context, when present) standing in for the source passage.
    Each of the m regenerated questions is compared to the original by
    embedding cosine, clamped into [0, 1], and averaged.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    passage = response if context is None else f"{response}\n{context}"
    sims = []
    for _ in range(m):
        prompt = prompts.question_prompt(passage)
        raw = gen.complete([{"role": "user", "content": prompt}])
        obj = _parse_json_object(raw)
        if "question" not in obj:
            raise FormatError('generator response lacks the "question" key',
                              payload=raw)
        regen = str(obj["question"]).strip()
        if not regen or not question.strip():
            sims.append(0.0)
            continue
        cos = cosine_similarity(embedder.embed(question), embedder.embed(regen))
        sims.append(min(max(cos, 0.0), 1.0))
    return float(np.mean(sims))


# -- judges --------------------------------------------------------------------


class JudgeClient(Protocol):
    def score(self, prompt: str) -> float: ...


_FLOAT_RE = re.compile(r"-?\d+(?:\.\d+)?")


class HttpJudgeClient:
    """Judge over the chat-completion wire format.

    The scoring prompt goes out as a single user message; the first
    number in the reply is the score, clamped into [0, 1].
    """

    def __init__(self, endpoint: str, model: str = "default",
                 api_key_env: str | None = None, timeout: float = 30.0,
                 retries: int = 2):
        self._chat = HttpChatClient(endpoint, model=model,
                                    api_key_env=api_key_env, timeout=timeout,
                                    retries=retries)

    def score(self, prompt: str) -> float:
        reply = self._chat.complete([{"role": "user", "content": prompt}])
        m = _FLOAT_RE.search(reply)
        if not m:
            raise FormatError("judge reply contains no number", payload=reply)
        return min(max(float(m.group(0)), 0.0), 1.0)


class StubJudge:
    """Deterministic offline judge.

    Consistency and filtering prompts score 1.0 when the response
    verbatim-contains a full sentence of the reference context, or is
    itself contained in that context; otherwise 0.0. Fluency prompts
    score a length/punctuation heuristic: 0.4 for an uppercase start,
    0.3 for terminal punctuation, 0.3 scaled by word count up to eight
    words.
    """

    def score(self, prompt: str) -> float:
        if "Evaluate the fluency" in prompt:
            return self._fluency(_extract(prompt, "Text: ",
                                          "\n\\n\nGive your score below:"))
        if "### CONTEXT" in prompt and "### RESPONSE" in prompt:
            if "### DISTRACTORS" in prompt:
                context = _extract(prompt, "### CONTEXT\n", "\n### DISTRACTORS")
            else:
                context = _extract(prompt, "### CONTEXT\n", "\n### RESPONSE")
            response = _extract(prompt, "### RESPONSE\n",
                                "\nReply with a single number")
            return self._containment(context, response)
        raise FormatError("stub judge got an unrecognized prompt",
                          payload=prompt)

    @staticmethod
    def _containment(context: str, response: str) -> float:
        resp = response.strip()
        if not resp:
            return 0.0
        sentences = [s.strip() for s in re.split(r"(?<=[.!?])\s+", context)
                     if s.strip()]
        if any(s in resp for s in sentences):
            return 1.0
        if resp in context:
            return 1.0
        return 0.0

    @staticmethod
    def _fluency(text: str) -> float:
        text = text.strip()
        if not text:
            return 0.0
        score = 0.0
        if text[0].isupper():
            score += 0.4
        if text[-1] in ".!?":
            score += 0.3
        score += 0.3 * min(1.0, len(text.split()) / 8.0)
        return min(score, 1.0)


def _extract(text: str, start: str, end: str) -> str:
    i = text.find(start)
    j = text.find(end, i)
    if i < 0 or j < 0:
        raise FormatError("prompt markers not found", payload=text)
    return text[i + len(start):j]


def compute_fl(response: str, judges: Sequence[JudgeClient],
               on_failure: Callable[[Exception], None] | None = None) -> float:
    """Mean fluency score across judges, each prompted with the fluency
    template.

    Individual judge failures are skipped (and reported through
    on_failure when given); if every judge fails the metric cannot be
    produced at all.
    """
    if not judges:
        raise ValueError("need at least one judge")
    prompt = prompts.fluency_prompt(response)
    scores = []
    errors = []
    for judge in judges:
        try:
            scores.append(min(max(judge.score(prompt), 0.0), 1.0))
        except Exception as exc:  # noqa: BLE001 - judge outage is data here
            errors.append(exc)
            if on_failure is not None:
                on_failure(exc)
    if not scores:
        raise EvaluationError(f"all {len(judges)} judges failed: {errors[-1]}")
    return float(np.mean(scores))


def score_faith(record, judge: JudgeClient, chunks: "ChunkResolver") -> float:
    """Consistency of the open response with the golden chunk.

    Only meaningful when retrieval returned exactly the golden chunk.
    """
    scenario = classify_scenario(record.retrieved, record.context_id)
    if scenario is not Scenario.GOLDEN_CONTEXT:
        raise ValueError(f"faith is defined for golden-context records, "
                         f"got {scenario.value}")
    if record.open_response is None:
        raise ValueError("record has no open response to score")
    prompt = prompts.faith_prompt(chunks(record.context_id),
                                  record.open_response)
    return min(max(judge.score(prompt), 0.0), 1.0)


def score_filter(record, judge: JudgeClient, chunks: "ChunkResolver") -> float:
    """How well the open response ignores retrieved distractors.

    Only meaningful when retrieval returned the golden chunk plus noise.
    """
    scenario = classify_scenario(record.retrieved, record.context_id)
    if scenario is not Scenario.MIXED_CONTEXT:
        raise ValueError(f"filtering is defined for mixed-context records, "
                         f"got {scenario.value}")
    if record.open_response is None:
        raise ValueError("record has no open response to score")
    distractors = "\n\n".join(chunks(cid) for cid in record.retrieved
                              if cid != record.context_id)
    prompt = prompts.filter_prompt(chunks(record.context_id), distractors,
                                   record.open_response)
    return min(max(judge.score(prompt), 0.0), 1.0)


ChunkResolver = Callable[[str], str]


# -- evaluation driver ---------------------------------------------------------


class GenerativeModel(Protocol):
    def generate_text(self, prompt: str, max_new_tokens: int = 48) -> str: ...


@dataclass
class EvalConfig:
    embedder: Embedder
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    index: CorpusIndex | None = None
    judges: Sequence[JudgeClient] = ()
    generator: GeneratorClient | None = None
    ra_weights: RaWeights = field(default_factory=RaWeights)
    refusal_phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES
    qr_samples: int = 1
    max_new_tokens: int = 48
    use_stored_retrieval: bool = False


@dataclass
class EvalReport:
    mode: str
    record_count: int
    scenario_counts: dict[str, int]
    faith: float | None = None
    filter: float | None = None
    rr: float | None = None
    ra_open: float | None = None
    ra_closed: float | None = None
    qr: float | None = None
    fl: float | None = None
    partial: bool = False
    failures: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "record_count": self.record_count,
            "scenario_counts": self.scenario_counts,
            "faith": self.faith,
            "filter": self.filter,
            "rr": self.rr,
            "ra_open": self.ra_open,
            "ra_closed": self.ra_closed,
            "qr": self.qr,
            "fl": self.fl,
            "partial": self.partial,
            "failures": self.failures,
        }, sort_keys=True)

    def to_table(self) -> str:
        """Aligned text table; absent metrics render as a dash."""
        columns = [("Faith", self.faith), ("Filter", self.filter),
                   ("RR", self.rr), ("RA-open", self.ra_open),
                   ("RA-closed", self.ra_closed), ("QR", self.qr),
                   ("FL", self.fl)]
        header = []
        values = []
        for name, value in columns:
            cell = "-" if value is None else f"{value:.4f}"
            width = max(len(name), len(cell))
            header.append(name.rjust(width))
            values.append(cell.rjust(width))
        lines = [
            f"mode: {self.mode}  records: {self.record_count}",
            "scenarios: " + json.dumps(self.scenario_counts, sort_keys=True),
            "  ".join(header),
            "  ".join(values),
        ]
        if self.partial:
            lines.append(f"partial: {len(self.failures)} failure(s)")
        return "\n".join(lines)


def _mean_or_none(values: list[float]) -> float | None:
    if not values:
        return None
    return float(np.mean(values))


def evaluate(records: list, model: GenerativeModel, mode: str,
             cfg: EvalConfig) -> EvalReport:
    """Run one evaluation mode over the records.

    Modes: "open" retrieves context and reports Faith/Filter/RR/RA;
    "closed" prompts without context and reports RA only; "cross" runs
    both response paths and reports QR and FL averaged over them.
    Response fields on the records are populated in place. Judge or
    generator failures mark the report partial instead of aborting.
    """
    if mode not in ("open", "closed", "cross"):
        raise ValueError(f"unknown mode {mode!r}")
    if not records:
        raise ValueError("cannot evaluate an empty record list")
    needs_retrieval = mode in ("open", "cross")
    if needs_retrieval and cfg.index is None:
        raise ConfigError(f"mode {mode!r} requires a corpus index")
    if mode == "cross" and cfg.generator is None:
        raise ConfigError("cross mode requires a question generator")
    if mode == "cross" and not cfg.judges:
        raise ConfigError("cross mode requires at least one judge")

    report = EvalReport(mode=mode, record_count=len(records),
                        scenario_counts={})

    def note_failure(record_idx: int, exc: Exception) -> None:
        report.partial = True
        report.failures.append(f"record {record_idx}: {exc}")

    scenarios: list[Scenario | None] = [None] * len(records)
    if needs_retrieval:
        counts = {s.value: 0 for s in Scenario}
        for i, record in enumerate(records):
            if cfg.use_stored_retrieval:
                hits = list(record.retrieved)
            else:
                hits = [h.chunk_id for h in
                        cfg.index.retrieve(record.q, cfg.retrieval,
                                           cfg.embedder)]
                record.retrieved = hits
            scenarios[i] = classify_scenario(hits, record.context_id)
            counts[scenarios[i].value] += 1
        report.scenario_counts = counts

    def open_prompt(record) -> str:
        context = "\n\n".join(cfg.index.text_of(cid)
                              for cid in record.retrieved)
        return prompts.open_book_prompt(context, record.q)

    if needs_retrieval:
        for i, record in enumerate(records):
            if scenarios[i] is Scenario.EMPTY_CONTEXT:
                prompt = prompts.closed_book_prompt(record.q)
            else:
                prompt = open_prompt(record)
            record.open_response = model.generate_text(
                prompt, max_new_tokens=cfg.max_new_tokens)
    if mode in ("closed", "cross"):
        for record in records:
            record.closed_response = model.generate_text(
                prompts.closed_book_prompt(record.q),
                max_new_tokens=cfg.max_new_tokens)

    if mode == "open":
        faith_scores: list[float] = []
        filter_scores: list[float] = []
        irrelevant_responses: list[str] = []
        ra_values: list[float] = []
        for i, record in enumerate(records):
            ra_values.append(compute_ra(record.open_response,
                                        record.ground_truth, cfg.ra_weights,
                                        cfg.embedder))
            if scenarios[i] is Scenario.IRRELEVANT_CONTEXT:
                irrelevant_responses.append(record.open_response)
            elif scenarios[i] in (Scenario.GOLDEN_CONTEXT,
                                  Scenario.MIXED_CONTEXT) and cfg.judges:
                scorer = (score_faith
                          if scenarios[i] is Scenario.GOLDEN_CONTEXT
                          else score_filter)
                try:
                    value = scorer(record, cfg.judges[0], cfg.index.text_of)
                except EvaluationError as exc:
                    note_failure(i, exc)
                except (ConfigError, FormatError, RuntimeError) as exc:
                    note_failure(i, exc)
                else:
                    if scenarios[i] is Scenario.GOLDEN_CONTEXT:
                        faith_scores.append(value)
                    else:
                        filter_scores.append(value)
        report.faith = _mean_or_none(faith_scores)
        report.filter = _mean_or_none(filter_scores)
        report.rr = compute_rr(irrelevant_responses, cfg.refusal_phrases)
        report.ra_open = _mean_or_none(ra_values)
    elif mode == "closed":
        report.ra_closed = _mean_or_none([
            compute_ra(r.closed_response, r.ground_truth, cfg.ra_weights,
                       cfg.embedder)
            for r in records])
    else:  # cross
        qr_values: list[float] = []
        fl_values: list[float] = []
        for i, record in enumerate(records):
            context = "\n\n".join(cfg.index.text_of(cid)
                                  for cid in record.retrieved) or None
            for response, resp_context in (
                    (record.open_response, context),
                    (record.closed_response, None)):
                try:
                    qr_values.append(compute_qr(
                        record.q, response, resp_context, cfg.generator,
                        cfg.embedder, m=cfg.qr_samples))
                except (EvaluationError, FormatError, RuntimeError) as exc:
                    note_failure(i, exc)
                try:
                    fl_values.append(compute_fl(
                        response, cfg.judges,
                        on_failure=lambda exc, i=i: note_failure(i, exc)))
                except EvaluationError as exc:
                    note_failure(i, exc)
        report.qr = _mean_or_none(qr_values)
        report.fl = _mean_or_none(fl_values)
    return report
