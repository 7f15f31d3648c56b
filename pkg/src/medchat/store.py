"""Summary schema, parsing, and the SQLite persistence layer.

The store is the only component allowed to touch the database. Dialogue
backends never receive a handle to it; they get plain-data context bundles
and return text, and everything they produce enters storage through the
narrow write methods here.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import sqlite3
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources

from .dialogue import contains_question
from .errors import (
    AlreadyPersistedError,
    InvalidConfigError,
    NotFoundError,
    NotReadyError,
    ParseError,
    SummarySchemaError,
)

log = logging.getLogger(__name__)

CATEGORY_KEYS = ("symptoms", "diagnosis", "treatment", "test_procedure", "medication")
NONE_MARKER = "none reported"

REPORT_HEADINGS = (
    ("symptoms", "Symptoms"),
    ("diagnosis", "Diagnosis"),
    ("treatment", "Treatment"),
    ("test_procedure", "Tests/Procedures"),
    ("medication", "Medication"),
)

_FENCE = re.compile(r"\A\s*```[\w-]*\s*(.*?)\s*```\s*\Z", re.DOTALL)


# --- summary documents ------------------------------------------------------------


@dataclass(frozen=True)
class CategoryBlock:
    """One summary category: the extracted items plus a prose recap."""

    items: tuple[str, ...]
    summary: str

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not all(isinstance(item, str) for item in self.items):
            raise SummarySchemaError("items must be a list of strings")
        if not isinstance(self.summary, str) or not self.summary:
            raise SummarySchemaError("summary must be a non-empty string")
        if not self.items and self.summary != NONE_MARKER:
            raise SummarySchemaError(
                f"empty categories must carry the marker summary {NONE_MARKER!r}"
            )

    def as_dict(self) -> dict:
        return {"items": list(self.items), "summary": self.summary}


@dataclass(frozen=True)
class SummaryDocument:
    """The full five-category consultation summary."""

    symptoms: CategoryBlock
    diagnosis: CategoryBlock
    treatment: CategoryBlock
    test_procedure: CategoryBlock
    medication: CategoryBlock

    def category(self, key: str) -> CategoryBlock:
        if key not in CATEGORY_KEYS:
            raise SummarySchemaError(f"unknown category {key!r}")
        return getattr(self, key)

    def as_dict(self) -> dict:
        return {key: self.category(key).as_dict() for key in CATEGORY_KEYS}


def _category_from_json(key: str, value: object) -> CategoryBlock:
    if not isinstance(value, dict):
        raise SummarySchemaError(f"category {key!r} must be an object")
    extras = set(value) - {"items", "summary"}
    if extras:
        raise SummarySchemaError(f"category {key!r} has unknown fields: {sorted(extras)}")
    if set(value) != {"items", "summary"}:
        raise SummarySchemaError(f"category {key!r} needs both items and summary")
    items = value["items"]
    if not isinstance(items, list):
        raise SummarySchemaError(f"category {key!r} items must be a list")
    return CategoryBlock(items=tuple(items), summary=value["summary"])


def parse_summary(raw: str) -> SummaryDocument:
    """Parse raw backend output into a validated SummaryDocument.

    Accepts the bare JSON object or the same object wrapped in a code fence.
    """
    text = raw.strip()
    fenced = _FENCE.match(text)
    if fenced:
        text = fenced.group(1)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"summary is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise SummarySchemaError("summary must be a JSON object")
    missing = [key for key in CATEGORY_KEYS if key not in payload]
    if missing:
        raise SummarySchemaError(f"missing categories: {missing}")
    extras = sorted(set(payload) - set(CATEGORY_KEYS))
    if extras:
        raise SummarySchemaError(f"unexpected top-level keys: {extras}")
    blocks = {key: _category_from_json(key, payload[key]) for key in CATEGORY_KEYS}
    return SummaryDocument(**blocks)


def serialize_summary(doc: SummaryDocument, indent: int | None = 2) -> str:
    return json.dumps(doc.as_dict(), indent=indent, ensure_ascii=False)


def summary_json_schema() -> dict:
    """The published JSON-Schema document for external validators."""
    payload = resources.files("medchat.data").joinpath("summary.schema.json").read_text()
    return json.loads(payload)


# --- context bundles --------------------------------------------------------------


@dataclass
class ContextBundle:
    """Plain-data snapshot handed to a backend; carries no query capability."""

    patient_id: str
    display_ref: str
    created_at: str
    history_texts: list[str] = field(default_factory=list)


# --- the store --------------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fernet(key: str | bytes):
    try:
        from cryptography.fernet import Fernet
    except ImportError as exc:
        raise InvalidConfigError(
            "encryption_key given but the cryptography package is not installed"
        ) from exc
    if isinstance(key, str):
        key = key.encode()
    digest = hashlib.sha256(key).digest()
    return Fernet(base64.urlsafe_b64encode(digest))


def _iter_migrations():
    root = resources.files("medchat.data").joinpath("migrations")
    entries = sorted(entry.name for entry in root.iterdir() if entry.name.endswith(".sql"))
    for name in entries:
        yield int(name.split("_", 1)[0]), root.joinpath(name).read_text()


_WRITE_VERBS = ("INSERT", "UPDATE", "DELETE", "REPLACE")


class ConsultStore:
    """Single-writer persistence for patients, sessions, transcripts, summaries.

    path ":memory:" keeps everything in RAM. With encryption_key set, the live
    database also stays in RAM and flush() writes an encrypted snapshot to
    path; the key is hashed to a symmetric cipher key, key management stays
    with the deployment. audit=True records every data-modifying SQL
    statement in audit_log, which is how isolation tests prove that backend
    code never writes.
    """

    def __init__(
        self,
        path: str = ":memory:",
        *,
        encryption_key: str | bytes | None = None,
        clock=None,
        audit: bool = False,
    ):
        self._path = path
        self._clock = clock or _utc_now
        self._lock = threading.RLock()
        self._cipher = None
        self.audit_log: list[str] = []
        if encryption_key is not None:
            if path == ":memory:":
                raise InvalidConfigError("encrypted stores need a file path to flush to")
            self._cipher = _fernet(encryption_key)
            self._conn = sqlite3.connect(":memory:", check_same_thread=False)
            self._load_encrypted()
        else:
            self._conn = sqlite3.connect(path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys = ON")
        if audit:
            self._conn.set_trace_callback(self._trace)
        self._migrate()

    # -- lifecycle --

    def _trace(self, sql: str) -> None:
        head = sql.lstrip().upper()
        if head.startswith(_WRITE_VERBS):
            self.audit_log.append(sql.strip())

    def _migrate(self) -> None:
        with self._lock, self._conn:
            current = self._conn.execute("PRAGMA user_version").fetchone()[0]
            for version, ddl in _iter_migrations():
                if version <= current:
                    continue
                self._conn.executescript(ddl)
                self._conn.execute(f"PRAGMA user_version = {version}")
                log.info("applied store migration %04d", version)

    def _load_encrypted(self) -> None:
        if not os.path.exists(self._path):
            return
        with open(self._path, "rb") as fh:
            blob = fh.read()
        if not blob:
            return
        from cryptography.fernet import InvalidToken

        try:
            dump = self._cipher.decrypt(blob).decode()
        except InvalidToken as exc:
            raise InvalidConfigError(
                "cannot decrypt store: wrong key or corrupted file"
            ) from exc
        self._conn.executescript(dump)

    def flush(self) -> None:
        """Write the encrypted at-rest snapshot; no-op for plaintext stores."""
        if self._cipher is None:
            return
        with self._lock:
            # iterdump omits user_version, so restate it for the reload path
            version = self._conn.execute("PRAGMA user_version").fetchone()[0]
            dump = "\n".join(self._conn.iterdump()) + f"\nPRAGMA user_version = {version};"
            blob = self._cipher.encrypt(dump.encode())
            tmp = self._path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, self._path)

    def close(self) -> None:
        self.flush()
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    # -- patients and history --

    def register_patient(self, display_ref: str, patient_id: str | None = None) -> str:
        patient_id = patient_id or uuid.uuid4().hex[:12]
        with self._lock:
            try:
                with self._conn:
                    self._conn.execute(
                        "INSERT INTO patients (patient_id, display_ref, created_at) "
                        "VALUES (?, ?, ?)",
                        (patient_id, display_ref, self._clock()),
                    )
            except sqlite3.IntegrityError as exc:
                raise AlreadyPersistedError(f"patient {patient_id!r} already registered") from exc
        return patient_id

    def add_history(self, patient_id: str, text: str, tags=()) -> int:
        with self._lock:
            self._require_patient(patient_id)
            with self._conn:
                cur = self._conn.execute(
                    "INSERT INTO history_extracts (patient_id, text, tags) VALUES (?, ?, ?)",
                    (patient_id, text, json.dumps(list(tags))),
                )
            return cur.lastrowid

    def build_context(self, patient_id: str) -> ContextBundle:
        """Copy a patient's preloaded history into a plain-data bundle."""
        with self._lock:
            row = self._require_patient(patient_id)
            texts = self._conn.execute(
                "SELECT text FROM history_extracts WHERE patient_id = ? ORDER BY extract_id",
                (patient_id,),
            ).fetchall()
        return ContextBundle(
            patient_id=row["patient_id"],
            display_ref=row["display_ref"],
            created_at=row["created_at"],
            history_texts=[r["text"] for r in texts],
        )

    def _require_patient(self, patient_id: str) -> sqlite3.Row:
        row = self._conn.execute(
            "SELECT * FROM patients WHERE patient_id = ?", (patient_id,)
        ).fetchone()
        if row is None:
            raise NotFoundError(f"unknown patient {patient_id!r}")
        return row

    # -- sessions and turns --

    def create_session(self, patient_id: str, session_id: str | None = None) -> str:
        session_id = session_id or uuid.uuid4().hex[:12]
        with self._lock:
            self._require_patient(patient_id)
            try:
                with self._conn:
                    self._conn.execute(
                        "INSERT INTO sessions (session_id, patient_id, phase, created_at) "
                        "VALUES (?, ?, 'GREETING', ?)",
                        (session_id, patient_id, self._clock()),
                    )
            except sqlite3.IntegrityError as exc:
                raise AlreadyPersistedError(f"session {session_id!r} already exists") from exc
        return session_id

    def set_session_phase(self, session_id: str, phase: str) -> None:
        with self._lock:
            self._require_session(session_id)
            with self._conn:
                self._conn.execute(
                    "UPDATE sessions SET phase = ? WHERE session_id = ?", (phase, session_id)
                )

    def get_session(self, session_id: str) -> dict:
        with self._lock:
            return dict(self._require_session(session_id))

    def _require_session(self, session_id: str) -> sqlite3.Row:
        row = self._conn.execute(
            "SELECT * FROM sessions WHERE session_id = ?", (session_id,)
        ).fetchone()
        if row is None:
            raise NotFoundError(f"unknown session {session_id!r}")
        return row

    def record_turn(
        self,
        session_id: str,
        index: int,
        role: str,
        text: str,
        guard_category: str | None = None,
        guard_rule_id: str | None = None,
    ) -> int:
        if role not in ("bot", "patient"):
            raise InvalidConfigError(f"unknown turn role {role!r}")
        with self._lock:
            self._require_session(session_id)
            try:
                with self._conn:
                    cur = self._conn.execute(
                        "INSERT INTO turns (session_id, turn_index, role, text, "
                        "guard_category, guard_rule_id) VALUES (?, ?, ?, ?, ?, ?)",
                        (session_id, index, role, text, guard_category, guard_rule_id),
                    )
            except sqlite3.IntegrityError as exc:
                raise AlreadyPersistedError(
                    f"turn {index} of session {session_id!r} already recorded"
                ) from exc
            return cur.lastrowid

    def get_transcript(self, session_id: str) -> list[dict]:
        with self._lock:
            self._require_session(session_id)
            rows = self._conn.execute(
                "SELECT turn_index, role, text, guard_category, guard_rule_id "
                "FROM turns WHERE session_id = ? ORDER BY turn_index",
                (session_id,),
            ).fetchall()
        return [dict(row) for row in rows]

    # -- summaries --

    def persist_summary(self, session_id: str, doc: SummaryDocument, *, crash_hook=None):
        """Atomically write one row per category and mark the session DONE.

        crash_hook, when given, is invoked with the running row count after
        each insert; an exception from it rolls the whole write back. It
        exists so tests can prove no partial summary is ever observable.
        """
        with self._lock:
            session = self._require_session(session_id)
            existing = self._conn.execute(
                "SELECT COUNT(*) FROM summaries WHERE session_id = ?", (session_id,)
            ).fetchone()[0]
            if existing or session["phase"] == "DONE":
                raise AlreadyPersistedError(f"summary for {session_id!r} already persisted")
            if session["phase"] != "SUMMARIZING":
                raise NotReadyError(
                    f"session {session_id!r} is in {session['phase']}, not SUMMARIZING"
                )
            row_ids = []
            with self._conn:
                for key in CATEGORY_KEYS:
                    block = doc.category(key)
                    cur = self._conn.execute(
                        "INSERT INTO summaries (session_id, category, items, summary) "
                        "VALUES (?, ?, ?, ?)",
                        (session_id, key, json.dumps(list(block.items)), block.summary),
                    )
                    row_ids.append(cur.lastrowid)
                    if crash_hook is not None:
                        crash_hook(len(row_ids))
                self._conn.execute(
                    "UPDATE sessions SET phase = 'DONE', finished_at = ? WHERE session_id = ?",
                    (self._clock(), session_id),
                )
            return tuple(row_ids)

    def fetch_summary(self, session_id: str) -> SummaryDocument:
        with self._lock:
            self._require_session(session_id)
            rows = self._conn.execute(
                "SELECT category, items, summary FROM summaries WHERE session_id = ?",
                (session_id,),
            ).fetchall()
        if not rows:
            raise NotFoundError(f"no summary persisted for session {session_id!r}")
        by_key = {row["category"]: row for row in rows}
        blocks = {
            key: CategoryBlock(
                items=tuple(json.loads(by_key[key]["items"])), summary=by_key[key]["summary"]
            )
            for key in CATEGORY_KEYS
        }
        return SummaryDocument(**blocks)

    # -- reports --

    def generate_report(self, session_id: str) -> str:
        """Deterministic plain-text physician report for a finished session."""
        with self._lock:
            session = self._require_session(session_id)
            if session["phase"] != "DONE":
                raise NotReadyError(
                    f"session {session_id!r} is in {session['phase']}, not DONE"
                )
            patient = self._require_patient(session["patient_id"])
            turns = self.get_transcript(session_id)
            doc = self.fetch_summary(session_id)
        questions = sum(
            1 for t in turns if t["role"] == "bot" and contains_question(t["text"])[0]
        )
        lines = [
            "Consultation report",
            "===================",
            f"Session:   {session_id}",
            f"Patient:   {patient['display_ref']}",
            f"Started:   {session['created_at']}",
            f"Finished:  {session['finished_at']}",
            f"Turns:     {len(turns)}",
            f"Questions: {questions}",
            "",
        ]
        for key, heading in REPORT_HEADINGS:
            block = doc.category(key)
            lines.append(heading)
            lines.append("-" * len(heading))
            for item in block.items:
                lines.append(f"- {item}")
            lines.append(f"Summary: {block.summary}")
            lines.append("")
        return "\n".join(lines)
