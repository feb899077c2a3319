"""Remote language-model scorer: chat-completion client with record/replay.

The planner needs per-candidate probabilities; commercial endpoints expose
neither token likelihoods nor per-candidate scores, so each planning
decision becomes one structured completion request (chain-of-thought
prompt, JSON answer with a chosen candidate and a confidence). The chosen
candidate receives the stated confidence, the rest share the remainder.

Transports make the client hermetic: HTTPTransport talks to the real
endpoint, RecordingTransport snapshots request/response pairs to a file,
ReplayTransport serves them back by exact request match.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import requests

from .planner import ScoreResult, ScorerQuery

__all__ = [
    "LLMError",
    "ReplayMiss",
    "LLMConfig",
    "HTTPTransport",
    "RecordingTransport",
    "ReplayTransport",
    "LLMScorer",
    "llm_score",
    "load_prompt_template",
]

ENV_ENDPOINT = "EXOASSIST_LLM_ENDPOINT"
ENV_MODEL = "EXOASSIST_LLM_MODEL"
ENV_API_KEY = "EXOASSIST_LLM_API_KEY"


class LLMError(RuntimeError):
    """Transport or protocol failure talking to the model endpoint."""


class ReplayMiss(LLMError):
    """Replay fixture has no response recorded for this request."""


@dataclass
class LLMConfig:
    endpoint: str
    model: str
    api_key: str = ""
    timeout: float = 20.0
    retries: int = 1
    temperature: float = 0.0

    @classmethod
    def from_env(cls) -> "LLMConfig":
        endpoint = os.environ.get(ENV_ENDPOINT, "")
        model = os.environ.get(ENV_MODEL, "")
        if not endpoint or not model:
            raise LLMError(
                f"remote scorer needs {ENV_ENDPOINT} and {ENV_MODEL} set")
        return cls(endpoint=endpoint, model=model,
                   api_key=os.environ.get(ENV_API_KEY, ""))


class HTTPTransport:
    def __init__(self, config: LLMConfig):
        self.config = config

    def send(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        try:
            resp = requests.post(url, json=payload, headers=headers,
                                 timeout=self.config.timeout)
            resp.raise_for_status()
            return resp.json()
        except requests.RequestException as exc:
            raise LLMError(f"chat completion request failed: {exc}") from exc


class RecordingTransport:
    """Wraps another transport and appends request/response pairs to a file."""

    def __init__(self, inner, path: str | Path):
        self.inner = inner
        self.path = Path(path)

    def send(self, payload: dict) -> dict:
        response = self.inner.send(payload)
        entries = []
        if self.path.exists():
            entries = json.loads(self.path.read_text())
        entries.append({"request": payload, "response": response})
        self.path.write_text(json.dumps(entries, indent=1))
        return response


class ReplayTransport:
    """Serves recorded responses by exact request equality."""

    def __init__(self, path: str | Path):
        self.entries = json.loads(Path(path).read_text())

    def send(self, payload: dict) -> dict:
        for entry in self.entries:
            if entry["request"] == payload:
                return entry["response"]
        raise ReplayMiss(
            f"no recorded response for request with "
            f"{len(payload.get('messages', []))} messages")


def load_prompt_template(path: str | Path | None = None) -> str:
    if path is None:
        path = Path(__file__).parent / "data" / "prompt_template.txt"
    return Path(path).read_text()


class LLMScorer:
    """Scores planner queries through one completion per decision.

    On transport failure the scorer retries, then falls back to the given
    scorer (typically the rule scorer) if configured; every fallback is
    recorded in ``events``.
    """

    def __init__(self, config: LLMConfig, transport=None, template: str | None = None,
                 fallback=None):
        self.config = config
        self.transport = transport or HTTPTransport(config)
        self.template = template or load_prompt_template()
        self.fallback = fallback
        self.events: list[dict] = []
        self._decisions: dict = {}  # (task, history, context) -> (scores, invalid)

    # -- decision layer ------------------------------------------------------

    def _payload(self, system: str, user: str) -> dict:
        return {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }

    def _complete(self, system: str, user: str) -> str:
        payload = self._payload(system, user)
        last_exc: Exception | None = None
        for _ in range(max(1, self.config.retries + 1)):
            try:
                response = self.transport.send(payload)
                return response["choices"][0]["message"]["content"]
            except ReplayMiss:
                raise  # a missing fixture entry cannot succeed on retry
            except (LLMError, KeyError, IndexError, TypeError) as exc:
                last_exc = exc
        raise LLMError(f"completion failed after retries: {last_exc}")

    @staticmethod
    def parse_choice(content: str, candidates: list[str]):
        """Extract {'choice','confidence'} JSON; unknown choice -> invalid."""
        try:
            start = content.index("{")
            end = content.rindex("}") + 1
            data = json.loads(content[start:end])
            choice = str(data["choice"]).strip()
            confidence = float(data.get("confidence", 1.0))
        except (ValueError, KeyError, TypeError):
            return None, 0.0
        if choice not in candidates:
            return None, confidence
        return choice, min(max(confidence, 0.0), 1.0)

    def decide(self, task: str, candidates: list[str], history: tuple,
               context: str | None, functions: str) -> tuple[dict, bool]:
        key = (task, tuple(history), context, tuple(candidates))
        if key in self._decisions:
            return self._decisions[key]
        user = self.template.format(
            functions=functions,
            task=task,
            history="\n".join(history) if history else "(empty)",
            context=context or "(selecting the next subtask)",
            candidates="\n".join(f"- {c}" for c in candidates),
        )
        system = ("You are the task planner of an upper-limb assistive "
                  "exoskeleton. Reason step by step, then answer with JSON.")
        try:
            content = self._complete(system, user)
        except LLMError as exc:
            if self.fallback is not None:
                self.events.append({"type": "fallback", "reason": str(exc)})
                scores = {
                    c: self.fallback.score(ScorerQuery(
                        prompt="", task=task, candidate=c,
                        context=context, history=tuple(history))).probability
                    for c in candidates
                }
                self._decisions[key] = (scores, False)
                return scores, False
            raise
        choice, confidence = self.parse_choice(content, candidates)
        if choice is None:
            self.events.append({"type": "invalid_response", "content": content})
            self._decisions[key] = ({c: 0.0 for c in candidates}, True)
            return self._decisions[key]
        rest = (1.0 - confidence) / max(len(candidates) - 1, 1)
        scores = {c: (confidence if c == choice else rest) for c in candidates}
        self._decisions[key] = (scores, False)
        return scores, False

    # -- planner-facing interface ---------------------------------------------

    def score(self, query: ScorerQuery) -> ScoreResult:
        if query.context is None:
            candidates = self._subtask_names
        else:
            candidates = self._bindings_for_context(query.context)
        scores, invalid = self.decide(query.task, candidates, query.history,
                                      query.context, self._functions)
        if invalid:
            return ScoreResult(probability=0.0, invalid=True)
        return ScoreResult(probability=scores.get(query.candidate, 0.0))

    def bind_library(self, library) -> None:
        """The scorer needs the candidate sets to issue one query per decision."""
        self._subtask_names = library.names
        self._functions = library.describe_functions()
        self._context_map = {
            sub.description: [label for label, _ in sub.bindings]
            for sub in library.subtasks if sub.configurable
        }

    def _bindings_for_context(self, context: str) -> list[str]:
        return self._context_map[context]


def llm_score(query: ScorerQuery, scorer: LLMScorer) -> ScoreResult:
    """Single-query form mirroring rule_score."""
    return scorer.score(query)
