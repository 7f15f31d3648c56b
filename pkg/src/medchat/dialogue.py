"""Consultation engine: turn validation, the session state machine, pluggable
text backends, synthetic dialogue generation, and the dataset split.

The engine is persistence-free by design. Backends produce text and nothing
else, every patient utterance is screened by the guard before any backend may
see it, and whatever storage exists lives entirely behind the caller.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import resources

from .errors import (
    BackendProtocolError,
    EmptyDatasetError,
    InvalidConfigError,
    SessionFinishedError,
    TruncatedDialogueError,
)
from .guard import GuardVerdict, classify, default_ruleset

log = logging.getLogger(__name__)

INQUIRY_CATEGORIES = ("symptoms", "diagnosis", "treatment", "test_procedure", "medication")

DEFAULT_ADVICE_MARKERS = (
    r"\byou should\b",
    r"\bi recommend\b",
    r"\bi suggest\b",
    r"\byou need to\b",
    r"\btake\b.{0,40}\bdaily\b",
)

REFUSAL_QUESTION = (
    "I can only discuss your health today, so could you tell me more about your symptoms?"
)

DEFAULT_GREETING = (
    "Good morning, I'm Medchat, your AI healthcare expert. I'll do my best to "
    "help you today. Do you have any new complaints or symptoms that you'd "
    "like to discuss?"
)

WRAP_UP_QUESTION = "Do you have any other information about your symptoms or medical history?"

# phrases that close the session when given in reply to the wrap-up question
CLOSING_NEGATIVES = ("no", "nothing", "no, i don't", "no i don't", "nothing else")

_WRAP_UP_PATTERN = re.compile(
    r"any (?:other|further|additional|more) information"
    r"|anything (?:else|further|more) to (?:add|share|mention)",
    re.IGNORECASE,
)

_CATEGORY_MARKERS = {
    "symptoms": r"symptom|complaint|pain|fever|cough|feel|notice",
    "diagnosis": r"diagnos|condition|medical history|previously been",
    "treatment": r"treatment|therapy|tried|exercise",
    "test_procedure": r"test|procedure|x-ray|imaging|blood work|scan",
    "medication": r"medication|medicine|prescri|taking any",
}


class Phase(IntEnum):
    GREETING = 0
    QUESTIONING = 1
    CLOSING = 2
    SUMMARIZING = 3
    DONE = 4


@dataclass(frozen=True)
class DialogueTurn:
    role: str  # "bot" | "patient"
    text: str
    index: int
    guard_verdict: GuardVerdict | None = None


@dataclass(frozen=True)
class GuidelineConfig:
    """Knobs of the interview discipline enforced on every bot turn."""

    min_questions: int = 10
    eoa_token: str = "<EOA>"
    max_retries: int = 3
    advice_markers: tuple[str, ...] = DEFAULT_ADVICE_MARKERS
    categories: tuple[str, ...] = INQUIRY_CATEGORIES
    symptom_lexicon: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.min_questions < 1:
            raise InvalidConfigError("min_questions must be >= 1")
        if self.max_retries < 0:
            raise InvalidConfigError("max_retries must be >= 0")
        if not self.eoa_token:
            raise InvalidConfigError("eoa_token must be non-empty")


@dataclass
class SessionState:
    """Mutable record of one consultation; confined to a single session."""

    phase: Phase = Phase.GREETING
    question_count: int = 0
    covered_categories: set[str] = field(default_factory=set)
    open_symptoms: set[str] = field(default_factory=set)
    followed_up: set[str] = field(default_factory=set)
    transcript: list[DialogueTurn] = field(default_factory=list)
    context: object | None = None  # plain-data bundle handed to the backend


def new_session(context: object | None = None) -> SessionState:
    return SessionState(context=context)


@dataclass(frozen=True)
class SymptomRecord:
    disease: str
    symptoms: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.symptoms:
            raise InvalidConfigError("symptom record needs at least one symptom")
        object.__setattr__(self, "symptoms", tuple(self.symptoms))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


# --- question detection -----------------------------------------------------

_ABBREVIATIONS = frozenset({"e.g", "i.e", "dr", "mr", "mrs", "ms", "prof", "etc", "vs", "st"})
_TRAILING_TOKEN = re.compile(r"([A-Za-z]+(?:\.[A-Za-z]+)*)$")


def split_sentences(text: str) -> list[str]:
    """Sentence pieces with their terminal punctuation kept.

    A period is a boundary unless it sits inside a number, inside a token
    ("e.g."), or directly after a known abbreviation.
    """
    pieces: list[str] = []
    start = 0
    for match in re.finditer(r"[.!?]", text):
        i = match.start()
        if match.group() == ".":
            nxt = text[i + 1 : i + 2]
            if nxt and not nxt.isspace():
                continue  # mid-token dot: decimals, "e.g.", file names
            token = _TRAILING_TOKEN.search(text[:i])
            if token and token.group(1).lower() in _ABBREVIATIONS:
                continue
        piece = text[start : i + 1].strip()
        if piece:
            pieces.append(piece)
        start = i + 1
    tail = text[start:].strip()
    if tail:
        pieces.append(tail)
    return pieces


def contains_question(text: str) -> tuple[bool, str | None]:
    """Whether any sentence ends with '?'; returns the first one that does."""
    for sentence in split_sentences(text):
        if sentence.endswith("?"):
            return True, sentence
    return False, None


def is_wrapup_question(text: str) -> bool:
    return bool(_WRAP_UP_PATTERN.search(text))


def is_closing_negative(text: str) -> bool:
    normalized = re.sub(r"[.!?\s]+$", "", text.strip().lower())
    return normalized in CLOSING_NEGATIVES


def validate_bot_turn(text: str, state: SessionState, cfg: GuidelineConfig) -> list[Violation]:
    """Check one candidate bot utterance against the interview discipline.

    Greeting turns may carry introductory sentences before their question;
    every later turn must be a single one-sentence question free of advice.
    """
    violations: list[Violation] = []
    sentences = split_sentences(text)
    questions = [s for s in sentences if s.endswith("?")]

    if not questions:
        violations.append(Violation("no-question", "turn contains no question"))
    elif len(questions) > 1:
        violations.append(
            Violation("multiple-questions", f"{len(questions)} questions in one turn")
        )
    if (
        state.phase != Phase.GREETING
        and len(sentences) > 1
        and len(sentences) > len(questions)
    ):
        violations.append(
            Violation("multi-sentence", "question padded with extra sentences")
        )
    for marker in cfg.advice_markers:
        hit = re.search(marker, text, re.IGNORECASE)
        if hit:
            violations.append(Violation("advice", f"advice marker {hit.group(0)!r}"))
            break
    if questions and is_wrapup_question(text) and state.question_count + 1 < cfg.min_questions:
        violations.append(
            Violation(
                "premature-closing",
                f"wrap-up after {state.question_count} questions, "
                f"need {cfg.min_questions}",
            )
        )
    return violations


# --- symptom bookkeeping -----------------------------------------------------


def _mentions(text: str, phrase: str) -> bool:
    return all(
        re.search(rf"\b{re.escape(word)}\b", text, re.IGNORECASE)
        for word in phrase.split()
    )


def scan_symptoms(text: str, lexicon) -> set[str]:
    return {phrase for phrase in lexicon if _mentions(text, phrase)}


def _symptom_ledger(transcript, lexicon) -> tuple[set[str], set[str]]:
    """Replay the transcript and return (open, followed-up) symptom sets.

    A symptom counts as followed up when the bot question immediately before
    its mention already probed it, or when any later bot turn mentions it.
    """
    open_symptoms: set[str] = set()
    followed: set[str] = set()
    previous_bot: str | None = None
    for turn in transcript:
        if turn.role == "bot":
            for symptom in list(open_symptoms):
                if _mentions(turn.text, symptom):
                    open_symptoms.discard(symptom)
                    followed.add(symptom)
            previous_bot = turn.text
        else:
            for symptom in scan_symptoms(turn.text, lexicon):
                if symptom in followed:
                    continue
                if previous_bot is not None and _mentions(previous_bot, symptom):
                    followed.add(symptom)
                else:
                    open_symptoms.add(symptom)
    return open_symptoms, followed


# --- transcript operations ----------------------------------------------------


def filter_fillers(transcript, eoa_token: str = "<EOA>") -> list[DialogueTurn]:
    """Drop bot turns without a question; the terminal end-token turn stays.

    Patient turns are never touched. Indices are recomputed, so the operation
    is idempotent.
    """
    turns = list(transcript)
    kept = []
    for i, turn in enumerate(turns):
        if turn.role == "bot":
            has_question, _ = contains_question(turn.text)
            if not has_question and not (i == len(turns) - 1 and turn.text == eoa_token):
                continue
        kept.append(turn)
    return [replace(turn, index=i) for i, turn in enumerate(kept)]


def turn_to_dict(turn: DialogueTurn) -> dict:
    verdict = None
    if turn.guard_verdict is not None:
        verdict = {
            "category": turn.guard_verdict.category,
            "rule_id": turn.guard_verdict.rule_id,
        }
    return {"index": turn.index, "role": turn.role, "text": turn.text, "guard": verdict}


def transcript_to_json(session_id: str, state: SessionState) -> dict:
    return {
        "session_id": session_id,
        "turns": [turn_to_dict(t) for t in state.transcript],
        "state": {
            "phase": state.phase.name,
            "question_count": state.question_count,
            "covered_categories": sorted(state.covered_categories),
            "open_symptoms": sorted(state.open_symptoms),
        },
    }


# --- the state machine ---------------------------------------------------------


def _record(state: SessionState, role: str, text: str, verdict: GuardVerdict | None = None) -> None:
    state.transcript.append(
        DialogueTurn(role=role, text=text, index=len(state.transcript), guard_verdict=verdict)
    )


def _record_bot(state: SessionState, text: str, cfg: GuidelineConfig) -> None:
    _record(state, "bot", text)
    has_question, _ = contains_question(text)
    if has_question:
        state.question_count += 1
    for category, pattern in _CATEGORY_MARKERS.items():
        if category in cfg.categories and re.search(pattern, text, re.IGNORECASE):
            state.covered_categories.add(category)
    for symptom in list(state.open_symptoms):
        if _mentions(text, symptom):
            state.open_symptoms.discard(symptom)
            state.followed_up.add(symptom)


def _gate_violations(text: str, state: SessionState, cfg: GuidelineConfig) -> list[Violation]:
    violations = validate_bot_turn(text, state, cfg)
    if is_wrapup_question(text) and state.open_symptoms:
        violations.append(
            Violation(
                "premature-closing",
                "symptoms still open: " + ", ".join(sorted(state.open_symptoms)),
            )
        )
    return violations


def _request_bot_turn(state: SessionState, backend: BackendInterface, cfg: GuidelineConfig) -> str:
    text = backend.next_utterance(tuple(state.transcript), state.context)
    violations = _gate_violations(text, state, cfg)
    attempts = 0
    while violations and attempts < cfg.max_retries:
        attempts += 1
        log.info(
            "bot turn rejected (%s); retry %d/%d",
            ",".join(v.code for v in violations),
            attempts,
            cfg.max_retries,
        )
        text = backend.next_utterance(tuple(state.transcript), state.context)
        violations = _gate_violations(text, state, cfg)
    if violations:
        has_question, first_question = contains_question(text)
        if has_question:
            text = first_question
            violations = _gate_violations(text, state, cfg)
        if violations:
            raise BackendProtocolError(
                f"no valid question after {attempts} retries: "
                + "; ".join(v.message for v in violations)
            )
    return text


def step_session(
    state: SessionState,
    patient_input: str | None,
    backend: BackendInterface,
    guard_fn,
    cfg: GuidelineConfig,
) -> tuple[SessionState, str]:
    """Advance the consultation by one exchange and return the bot output.

    The guard verdict for patient_input is recorded on its turn before any
    backend call; a non-benign verdict short-circuits to a canned refusal.
    """
    if state.phase == Phase.DONE:
        raise SessionFinishedError("session is already finished")

    if state.phase == Phase.SUMMARIZING:
        if patient_input is not None:
            raise InvalidConfigError("the summarizing step takes no patient input")
        raw = backend.summarize(tuple(state.transcript))
        state.phase = Phase.DONE
        return state, raw

    if state.phase == Phase.GREETING:
        if patient_input is not None:
            raise InvalidConfigError("the consultation opens with a bot turn")
        text = _request_bot_turn(state, backend, cfg)
        _record_bot(state, text, cfg)
        state.phase = Phase.QUESTIONING
        return state, text

    if patient_input is None:
        raise InvalidConfigError("patient input required in this phase")

    verdict = guard_fn(patient_input)
    _record(state, "patient", patient_input, verdict)
    if not verdict.is_benign:
        log.info("guard rejected input: %s (rule %s)", verdict.category, verdict.rule_id)
        _record_bot(state, REFUSAL_QUESTION, cfg)
        return state, REFUSAL_QUESTION

    previous_bot = next(
        (t for t in reversed(state.transcript[:-1]) if t.role == "bot"), None
    )
    for symptom in scan_symptoms(patient_input, cfg.symptom_lexicon):
        if symptom in state.followed_up:
            continue
        if previous_bot is not None and _mentions(previous_bot.text, symptom):
            state.followed_up.add(symptom)
        else:
            state.open_symptoms.add(symptom)

    if state.phase == Phase.CLOSING and is_closing_negative(patient_input):
        _record(state, "bot", cfg.eoa_token)
        state.phase = Phase.SUMMARIZING
        return state, cfg.eoa_token

    text = _request_bot_turn(state, backend, cfg)
    _record_bot(state, text, cfg)
    if state.phase == Phase.QUESTIONING and is_wrapup_question(text):
        state.phase = Phase.CLOSING
    return state, text


# --- backends -------------------------------------------------------------------


class BackendInterface(ABC):
    """The whole backend surface: two text-in, text-out capabilities.

    Deliberately persistence-free. No store handle ever crosses this
    boundary, so model code cannot write application data.
    """

    @abstractmethod
    def next_utterance(self, transcript, context_bundle) -> str:
        raise NotImplementedError

    @abstractmethod
    def summarize(self, transcript) -> str:
        raise NotImplementedError


class ScriptedBackend(BackendInterface):
    """Replays a fixed list of bot utterances, one per invocation."""

    def __init__(self, lines, summary_text: str = "") -> None:
        self._lines = list(lines)
        self._cursor = 0
        self._summary_text = summary_text

    def next_utterance(self, transcript, context_bundle) -> str:
        if self._cursor >= len(self._lines):
            raise BackendProtocolError("script exhausted")
        text = self._lines[self._cursor]
        self._cursor += 1
        return text

    def summarize(self, transcript) -> str:
        return self._summary_text


class TemplateBackend(BackendInterface):
    """Rule-based interviewer: follows up every open symptom, then walks the
    five inquiry areas, padding with generic questions until the minimum
    count allows the wrap-up."""

    _FOLLOW_UPS = (
        "How long have you had {symptom}?",
        "How severe is the {symptom} on a scale from one to ten?",
        "Does anything make the {symptom} better or worse?",
    )
    _COVERAGE = (
        "Have you noticed any other symptoms or complaints recently?",
        "Have you previously been diagnosed with any medical condition?",
        "Have you tried any treatment for your complaints so far?",
        "Have you had any tests or procedures, such as blood work or imaging?",
        "Are you currently taking any medication, prescribed or over the counter?",
    )
    _PADDING = (
        "Have your symptoms changed over the course of the day?",
        "Has anyone around you had similar complaints recently?",
        "Have you had trouble sleeping because of your symptoms?",
        "Have you measured your temperature recently?",
        "Have you noticed any loss of appetite?",
        "Does physical activity make your symptoms worse?",
        "Have you had similar episodes in the past?",
        "Is there anything that reliably relieves your discomfort?",
    )

    def __init__(self, cfg: GuidelineConfig | None = None, lexicon=None) -> None:
        self._cfg = cfg or GuidelineConfig()
        if lexicon is not None:
            self._lexicon = tuple(lexicon)
        elif self._cfg.symptom_lexicon:
            self._lexicon = self._cfg.symptom_lexicon
        else:
            self._lexicon = default_symptom_lexicon()

    def next_utterance(self, transcript, context_bundle) -> str:
        bot_turns = [t for t in transcript if t.role == "bot"]
        if not bot_turns:
            return DEFAULT_GREETING
        questions = [t.text for t in bot_turns if contains_question(t.text)[0]]
        open_symptoms, _ = _symptom_ledger(transcript, self._lexicon)
        if open_symptoms:
            symptom = sorted(open_symptoms)[0]
            template = self._FOLLOW_UPS[len(bot_turns) % len(self._FOLLOW_UPS)]
            return template.format(symptom=symptom)
        asked = set(questions)
        for question in self._COVERAGE:
            if question not in asked:
                return question
        if len(questions) + 1 >= self._cfg.min_questions:
            return WRAP_UP_QUESTION
        for question in self._PADDING:
            if question not in asked:
                return question
        return WRAP_UP_QUESTION

    def summarize(self, transcript) -> str:
        open_symptoms, followed = _symptom_ledger(transcript, self._lexicon)
        items = sorted(open_symptoms | followed)
        none_marker = "none reported"
        document = {
            "symptoms": {
                "items": items,
                "summary": ("The patient reports " + ", ".join(items) + ".")
                if items
                else none_marker,
            },
            "diagnosis": {"items": [], "summary": none_marker},
            "treatment": {"items": [], "summary": none_marker},
            "test_procedure": {"items": [], "summary": none_marker},
            "medication": {"items": [], "summary": none_marker},
        }
        return json.dumps(document)


class HttpBackend(BackendInterface):
    """Adapter for an external model service behind the two-endpoint JSON
    contract; transport failures surface as BackendProtocolError."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self._base = base_url.rstrip("/")
        self._timeout = timeout

    def next_utterance(self, transcript, context_bundle) -> str:
        history = getattr(context_bundle, "history_texts", None)
        payload = {
            "transcript": [turn_to_dict(t) for t in transcript],
            "context": {"history_texts": list(history) if history else []},
        }
        return self._post("/v1/next", payload)

    def summarize(self, transcript) -> str:
        return self._post(
            "/v1/summarize", {"transcript": [turn_to_dict(t) for t in transcript]}
        )

    def _post(self, path: str, payload: dict) -> str:
        request = urllib.request.Request(
            self._base + path,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(request, timeout=self._timeout) as response:
                if response.status != 200:
                    raise BackendProtocolError(f"backend returned {response.status}")
                body = json.load(response)
        except (urllib.error.URLError, TimeoutError, json.JSONDecodeError) as exc:
            raise BackendProtocolError(f"backend request failed: {exc}") from exc
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise BackendProtocolError("backend reply is missing a text field")
        return body["text"]


# --- synthetic corpus --------------------------------------------------------------


class PatientSimulator:
    """Deterministic patient side of a synthesized dialogue.

    Reveals the record's symptoms one at a time, at most one new symptom per
    couple of answers, and answers follow-up probes with canned detail.
    """

    _DETAILS = (
        "It started about three days ago and has not improved.",
        "It gets noticeably worse in the evening.",
        "It is fairly severe, around seven out of ten.",
        "Resting helps a little, but it keeps coming back.",
    )

    def __init__(self, record: SymptomRecord, seed: int = 0) -> None:
        self._pending = list(record.symptoms)
        self._revealed: list[str] = []
        self._rng = random.Random(seed)
        self._answers_since_reveal = 1

    def reply(self, bot_question: str) -> str:
        if is_wrapup_question(bot_question):
            if self._pending:
                symptom = self._pending.pop(0)
                self._revealed.append(symptom)
                self._answers_since_reveal = 0
                return f"Actually, yes, I've also been having {symptom}."
            return "No, I don't."
        if any(_mentions(bot_question, s) for s in self._revealed):
            self._answers_since_reveal += 1
            return self._rng.choice(self._DETAILS)
        if self._pending and self._answers_since_reveal >= 1:
            symptom = self._pending.pop(0)
            self._revealed.append(symptom)
            self._answers_since_reveal = 0
            return f"Yes, I've been having {symptom}."
        self._answers_since_reveal += 1
        return "No, nothing like that."


def count_tokens(text: str) -> int:
    """Crude budget measure: whitespace-delimited words times 1.3."""
    return math.ceil(len(text.split()) * 1.3)


_DEFAULT_RULES = None


def _default_guard(text: str) -> GuardVerdict:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = default_ruleset()
    return classify(text, _DEFAULT_RULES)


def synthesize_dialogue(
    record: SymptomRecord,
    teacher: BackendInterface,
    cfg: GuidelineConfig | None = None,
    max_tokens: int = 1500,
    *,
    seed: int = 0,
    guard_fn=None,
) -> list[DialogueTurn]:
    """Drive one full simulated consultation for a symptom record.

    The returned transcript is already filler-free and ends with the
    end-of-anamnesis token; exceeding the token budget raises and the
    dialogue is discarded by the caller.
    """
    if cfg is None:
        cfg = GuidelineConfig(symptom_lexicon=tuple(record.symptoms))
    if guard_fn is None:
        guard_fn = _default_guard
    simulator = PatientSimulator(record, seed=seed)
    state = new_session()
    spent = 0

    def spend(text: str) -> None:
        nonlocal spent
        spent += count_tokens(text)
        if spent > max_tokens:
            raise TruncatedDialogueError(
                f"token budget {max_tokens} exhausted before the closing token"
            )

    state, bot_text = step_session(state, None, teacher, guard_fn, cfg)
    spend(bot_text)
    while state.phase < Phase.SUMMARIZING:
        patient_text = simulator.reply(bot_text)
        spend(patient_text)
        state, bot_text = step_session(state, patient_text, teacher, guard_fn, cfg)
        spend(bot_text)
    return filter_fillers(state.transcript, cfg.eoa_token)


def split_dataset(items, ratio: float = 0.9, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle split; |train| = round(ratio * n), partitions disjoint."""
    data = list(items)
    if not data:
        raise EmptyDatasetError("nothing to split")
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError("ratio must be strictly between 0 and 1")
    order = list(range(len(data)))
    random.Random(seed).shuffle(order)
    n_train = round(ratio * len(data))
    train = [data[i] for i in order[:n_train]]
    val = [data[i] for i in order[n_train:]]
    return train, val


# --- bundled fixtures ----------------------------------------------------------------


def load_symptom_table() -> list[SymptomRecord]:
    raw = resources.files("medchat.data").joinpath("symptom_table.json").read_text("utf-8")
    rows = json.loads(raw)["rows"]
    return [SymptomRecord(disease=r["disease"], symptoms=tuple(r["symptoms"])) for r in rows]


def default_symptom_lexicon() -> tuple[str, ...]:
    phrases = {s for record in load_symptom_table() for s in record.symptoms}
    return tuple(sorted(phrases))


def load_consult_fixture() -> dict:
    raw = resources.files("medchat.data").joinpath("consult_fixture.json").read_text("utf-8")
    return json.loads(raw)


def scripted_consult_backend(fixture: dict | None = None) -> ScriptedBackend:
    """Backend replaying the bundled reference consultation."""
    data = fixture or load_consult_fixture()
    return ScriptedBackend(data["bot_lines"], summary_text=json.dumps(data["summary"]))
