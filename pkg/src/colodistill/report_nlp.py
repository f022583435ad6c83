"""Report-level polyp label extraction.

An extractor is anything with ``send(PromptExchange) -> str``.  The chat
adapter talks to an OpenAI-compatible endpoint configured through
environment variables; :class:`RuleExtractor` is the offline stand-in.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import re
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

from .records import ColonoscopyRecord

log = logging.getLogger(__name__)

SYSTEM_PERSONA = "You are a professional endoscopist"
REPORT_PLACEHOLDER = "{report}"
USER_TEMPLATE = (
    "Based on the following text provided, determine whether the content refers to polyps. "
    "Flat and raised lesions are also a type of polyps. If there are polyps, answer 1; "
    "if there are no polyps, answer 0. You only need to answer 1 or 0, no explanation is "
    "required. Here is the text: {report}"
)
ROLES = ("system", "user", "assistant")

DEFAULT_LEXICON = frozenset({"polyp", "polyps", "raised lesion", "flat lesion", "息肉"})
DEFAULT_NEGATIONS = ("no", "without", "negative for", "未见", "无")

ENV_ENDPOINT = "COLODISTILL_LLM_ENDPOINT"
ENV_API_KEY = "COLODISTILL_LLM_API_KEY"
ENV_MODEL = "COLODISTILL_LLM_MODEL"


class AmbiguousResponse(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"response is not '0' or '1': {raw!r}")
        self.raw = raw


class ExtractionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptExchange:
    system_text: str
    user_text: str
    history: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.system_text:
            raise ValueError("system_text must be non-empty")
        for role, _ in self.history:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")

    def messages(self) -> list[dict]:
        msgs = [{"role": "system", "content": self.system_text}]
        msgs += [{"role": r, "content": t} for r, t in self.history]
        msgs.append({"role": "user", "content": self.user_text})
        return msgs


@dataclass(frozen=True)
class ReportLabel:
    value: int
    source: str

    def __post_init__(self):
        if self.value not in (0, 1):
            raise ValueError("label value must be 0 or 1")
        if self.source not in ("llm", "rule", "expert"):
            raise ValueError(f"unknown label source {self.source!r}")


class LabelExtractor(Protocol):
    source: str

    def send(self, exchange: PromptExchange) -> str: ...


def build_prompt(
    report_text: str, template: str = USER_TEMPLATE, persona: str = SYSTEM_PERSONA
) -> PromptExchange:
    if not report_text or not report_text.strip():
        raise ValueError("empty report")
    if template.count(REPORT_PLACEHOLDER) != 1:
        raise ValueError(f"template must contain exactly one {REPORT_PLACEHOLDER}")
    head, tail = template.split(REPORT_PLACEHOLDER)
    # plain concatenation: no escaping of the report body
    return PromptExchange(system_text=persona, user_text=head + report_text + tail)


def parse_response(text: str) -> int:
    t = text.strip()
    if t == "1":
        return 1
    if t == "0":
        return 0
    raise AmbiguousResponse(text)


_CLAUSE_SPLIT = re.compile(r"[.;,!?\n。；，！？]+")


def _cue_pattern(cue: str) -> str:
    if cue.isascii():
        return r"\b" + re.escape(cue) + r"\b"
    return re.escape(cue)


def rule_based_extract(
    report_text: str,
    lexicon: Iterable[str] = DEFAULT_LEXICON,
    negations: Iterable[str] = DEFAULT_NEGATIONS,
) -> int:
    """1 iff some lexicon term occurs in a clause without a preceding negation cue.

    Negation scope is the clause (split at sentence and comma punctuation).
    Adequate for templated text only.
    """
    lexicon = [t.lower() for t in lexicon]
    if not lexicon:
        raise ValueError("lexicon must be non-empty")
    term_re = re.compile("|".join(_cue_pattern(t) for t in sorted(lexicon, key=len, reverse=True)))
    neg_re = re.compile("|".join(_cue_pattern(c.lower()) for c in negations)) if negations else None
    for clause in _CLAUSE_SPLIT.split(report_text.lower()):
        for m in term_re.finditer(clause):
            if neg_re is None or not neg_re.search(clause[: m.start()]):
                return 1
    return 0


class RuleExtractor:
    """Answers the prompt by running the keyword rule on the embedded report.

    Stateless, so safe for concurrent use.
    """

    source = "rule"
    thread_safe = True

    def __init__(self, lexicon=DEFAULT_LEXICON, negations=DEFAULT_NEGATIONS, template=USER_TEMPLATE):
        self.lexicon = frozenset(lexicon)
        self.negations = tuple(negations)
        self._head, self._tail = template.split(REPORT_PLACEHOLDER)

    def send(self, exchange: PromptExchange) -> str:
        text = exchange.user_text
        if not (text.startswith(self._head) and text.endswith(self._tail)):
            raise ExtractionFailed("prompt does not match the configured template")
        report = text[len(self._head) : len(text) - len(self._tail) if self._tail else None]
        return str(rule_based_extract(report, self.lexicon, self.negations))


class ChatCompletionsExtractor:
    """OpenAI-style chat completions over HTTP.

    Holds no mutable state besides configuration; one instance may be shared
    across threads.
    """

    source = "llm"
    thread_safe = True

    def __init__(self, endpoint: str, api_key: str, model: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> "ChatCompletionsExtractor":
        env = os.environ if env is None else env
        missing = [k for k in (ENV_ENDPOINT, ENV_API_KEY, ENV_MODEL) if not env.get(k)]
        if missing:
            raise ExtractionFailed(f"missing environment variables: {', '.join(missing)}")
        return cls(env[ENV_ENDPOINT], env[ENV_API_KEY], env[ENV_MODEL])

    def request_body(self, exchange: PromptExchange) -> dict:
        return {"model": self.model, "messages": exchange.messages(), "temperature": 0}

    def send(self, exchange: PromptExchange) -> str:
        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps(self.request_body(exchange)).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return payload["choices"][0]["message"]["content"]


def extract_report_label(
    record: ColonoscopyRecord,
    extractor: LabelExtractor,
    retries: int = 2,
    backoff: float = 0.5,
    sleep=time.sleep,
) -> ReportLabel:
    """Query ``extractor`` until it answers 0/1, at most ``retries`` extra attempts.

    Ambiguous answers are fed back as chat history before retrying.
    """
    exchange = build_prompt(record.report_text)
    source = getattr(extractor, "source", "llm")
    last: Exception | None = None
    for attempt in range(retries + 1):
        if attempt:
            sleep(backoff * 2 ** (attempt - 1))
        try:
            raw = extractor.send(exchange)
        except ExtractionFailed:
            raise
        except Exception as e:  # transport errors
            log.warning("record %s: extractor error on attempt %d: %s", record.record_id, attempt + 1, e)
            last = e
            continue
        try:
            return ReportLabel(parse_response(raw), source)
        except AmbiguousResponse as e:
            log.info("record %s: ambiguous response %r", record.record_id, raw)
            last = e
            exchange = PromptExchange(
                exchange.system_text,
                exchange.user_text,
                exchange.history + (("user", exchange.user_text), ("assistant", raw)),
            )
    if isinstance(last, AmbiguousResponse):
        raise last
    raise ExtractionFailed(f"record {record.record_id}: {retries + 1} attempts failed: {last}")


def write_labels(path: str | Path, labels: Mapping[str, ReportLabel | int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["record_id", "label"])
        for rid, lab in labels.items():
            w.writerow([rid, lab.value if isinstance(lab, ReportLabel) else int(lab)])


def read_labels(path: str | Path) -> dict[str, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0] != ["record_id", "label"]:
        raise ValueError(f"{path}: expected header record_id<TAB>label")
    out = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 2 or row[1] not in ("0", "1"):
            raise ValueError(f"{path}: line {i}: malformed label row {row}")
        out[row[0]] = int(row[1])
    return out


@dataclass
class ScriptedExtractor:
    """Replays canned responses; for tests and dry runs."""

    responses: list[str]
    source: str = "llm"
    calls: list[PromptExchange] = field(default_factory=list)

    def send(self, exchange: PromptExchange) -> str:
        self.calls.append(exchange)
        r = self.responses[min(len(self.calls) - 1, len(self.responses) - 1)]
        if isinstance(r, Exception):
            raise r
        return r
