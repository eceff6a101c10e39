"""Optimistic/Pessimistic routing of window samples: LLM endpoint, rule, replay cache, oracle."""
from __future__ import annotations

import datetime as dt
import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import requests

from .features import WindowSample

log = logging.getLogger(__name__)

SYSTEM_INSTRUCTION = (
    "You are a financial market analyst. Given five consecutive days of market features and news, "
    "classify the outlook as exactly one word on the first line: Optimistic or Pessimistic. "
    "Then give a brief reason."
)


class Outlook(str, enum.Enum):
    OPTIMISTIC = "Optimistic"
    PESSIMISTIC = "Pessimistic"


class ParseFailure(ValueError):
    """The response names neither outlook."""


class RouterError(RuntimeError):
    """Routing failed and no fallback was allowed."""


@dataclass(frozen=True)
class RouterDecision:
    anchor_date: dt.date
    label: Outlook
    reasoning: str
    source: str  # "llm" | "rule" | "cache" | "oracle"
    model_id: str
    prompt_hash: str
    timestamp: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "label", Outlook(self.label))


@dataclass(frozen=True)
class RouterConfig:
    endpoint_url: str = "http://localhost:11434/v1/chat/completions"
    model_id: str = "llama3.2"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0
    fallback: str = "rule"  # "rule" | "fail"
    api_key_env: Optional[str] = None
    retry_backoff: float = 0.5

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.fallback not in ("rule", "fail"):
            raise ValueError(f"fallback must be 'rule' or 'fail', got {self.fallback!r}")


# --------------------------------------------------------------------------- prompt + parse

def prompt_messages(sample: WindowSample) -> list[dict]:
    return [
        {"role": "system", "content": SYSTEM_INSTRUCTION},
        {"role": "user", "content": "\n".join(sample.window_texts)},
    ]


def build_prompt(sample: WindowSample) -> str:
    return "\n\n".join(m["content"] for m in prompt_messages(sample))


def prompt_hash(prompt: str) -> str:
    """64-bit hex digest of the prompt text."""
    return hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).hexdigest()


_KEYWORD = re.compile(r"(optimistic|pessimistic)", re.IGNORECASE)


def parse_decision(raw_response: str) -> tuple[Outlook, str]:
    """Earliest of "optimistic"/"pessimistic" (any case) is the label.

    Reasoning is whatever follows the line holding the label; if nothing
    follows, the rest of that line after the keyword.
    """
    text = (raw_response or "").strip()
    m = _KEYWORD.search(text)
    if m is None:
        raise ParseFailure(f"no outlook keyword in response: {text[:80]!r}")
    label = Outlook.OPTIMISTIC if m.group(1).lower() == "optimistic" else Outlook.PESSIMISTIC
    line_end = text.find("\n", m.end())
    reasoning = text[line_end + 1:].strip() if line_end >= 0 else ""
    if not reasoning:
        tail = text[m.end():] if line_end < 0 else text[m.end():line_end]
        reasoning = tail.strip(" \t.,:;-")
    return label, reasoning


# --------------------------------------------------------------------------- cache

class DecisionCache:
    """Append-only JSONL store of decisions keyed by (prompt_hash, model_id).

    Safe for concurrent use; every line is a self-contained JSON object.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], dict] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        bad = 0
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._entries.setdefault((rec["prompt_hash"], rec["model_id"]), rec)
                except (json.JSONDecodeError, KeyError):
                    bad += 1
        if bad:
            log.warning("%s: skipped %d unreadable cache line(s)", self.path, bad)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def get(self, prompt_hash: str, model_id: str) -> Optional[RouterDecision]:
        rec = self._entries.get((prompt_hash, model_id))
        if rec is None:
            return None
        return RouterDecision(
            anchor_date=dt.date.fromisoformat(rec["anchor_date"]),
            label=Outlook(rec["label"]),
            reasoning=rec["reasoning"],
            source="cache",
            model_id=rec["model_id"],
            prompt_hash=rec["prompt_hash"],
            timestamp=rec.get("timestamp"),
        )

    def put(self, decision: RouterDecision) -> bool:
        """Record a decision; returns False if the key was already present."""
        key = (decision.prompt_hash, decision.model_id)
        rec = {
            "prompt_hash": decision.prompt_hash,
            "anchor_date": decision.anchor_date.isoformat(),
            "label": decision.label.value,
            "reasoning": decision.reasoning,
            "model_id": decision.model_id,
            "source": decision.source,
            "timestamp": decision.timestamp or _now(),
        }
        with self._lock:
            if key in self._entries:
                return False
            self._entries[key] = rec
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
        return True


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------- routers

RULE_MODEL_ID = "rule"


def route_rule(sample: WindowSample) -> RouterDecision:
    """Optimistic iff the mean of the window's five z_close values is > 0."""
    mean = float(np.mean(sample.z_close_window))
    return RouterDecision(
        anchor_date=sample.anchor_date,
        label=Outlook.OPTIMISTIC if mean > 0 else Outlook.PESSIMISTIC,
        reasoning=f"rule: mean 5-day close change {mean:.4f}",
        source="rule",
        model_id=RULE_MODEL_ID,
        prompt_hash=prompt_hash(build_prompt(sample)),
    )


def route_oracle(sample: WindowSample) -> RouterDecision:
    """Routes on the true generating regime of day t+1 (synthetic data only)."""
    if sample.next_regime is None:
        raise RouterError(f"{sample.anchor_date}: oracle routing needs a synthetic regime label")
    return RouterDecision(
        anchor_date=sample.anchor_date,
        label=Outlook.OPTIMISTIC if sample.next_regime == 1 else Outlook.PESSIMISTIC,
        reasoning=f"oracle: regime {sample.next_regime}",
        source="oracle",
        model_id="oracle",
        prompt_hash=prompt_hash(build_prompt(sample)),
    )


def chat_completion(config: RouterConfig, messages: list[dict]) -> str:
    """POST a chat-completion request and return the first choice's message content."""
    headers = {"Content-Type": "application/json"}
    if config.api_key_env:
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
    payload = {"model": config.model_id, "messages": messages, "temperature": config.temperature}
    resp = requests.post(config.endpoint_url, json=payload, headers=headers, timeout=config.timeout)
    resp.raise_for_status()
    return resp.json()["choices"][0]["message"]["content"]


Transport = Callable[[RouterConfig, list], str]


def route_llm(
    sample: WindowSample,
    config: RouterConfig,
    cache: DecisionCache,
    send: Transport = chat_completion,
) -> RouterDecision:
    prompt = build_prompt(sample)
    key = prompt_hash(prompt)
    cached = cache.get(key, config.model_id)
    if cached is not None:
        return replace(cached, anchor_date=sample.anchor_date)

    messages = prompt_messages(sample)
    last_exc: Optional[Exception] = None
    for attempt in range(config.max_retries + 1):
        if attempt and config.retry_backoff:
            time.sleep(config.retry_backoff * 2 ** (attempt - 1))
        try:
            label, reasoning = parse_decision(send(config, messages))
        except ParseFailure as exc:
            last_exc = exc
            continue
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            last_exc = exc
            log.debug("%s: attempt %d failed: %s", sample.anchor_date, attempt + 1, exc)
            continue
        decision = RouterDecision(sample.anchor_date, label, reasoning, "llm", config.model_id, key, _now())
        cache.put(decision)
        return decision

    if config.fallback == "fail":
        raise RouterError(f"{sample.anchor_date}: routing failed after {config.max_retries + 1} attempts: {last_exc}") from last_exc
    log.info("%s: falling back to rule router (%s)", sample.anchor_date, last_exc)
    rule = route_rule(sample)
    # Stored under the LLM model id so replay is complete; the line keeps source=rule.
    decision = replace(rule, model_id=config.model_id, prompt_hash=key, timestamp=_now())
    cache.put(decision)
    return decision


class LlmRouter:
    """Callable wrapper around :func:`route_llm` that counts endpoint requests."""

    def __init__(self, config: RouterConfig, cache: DecisionCache, send: Transport = chat_completion):
        self.config = config
        self.cache = cache
        self._send = send
        self._lock = threading.Lock()
        self.calls = 0

    def _counted_send(self, config, messages):
        with self._lock:
            self.calls += 1
        return self._send(config, messages)

    def __call__(self, sample: WindowSample) -> RouterDecision:
        return route_llm(sample, self.config, self.cache, self._counted_send)


class ReplayRouter:
    """Serves decisions from a cache only; a miss is an error."""

    def __init__(self, cache: DecisionCache, model_id: str):
        self.cache = cache
        self.model_id = model_id

    def __call__(self, sample: WindowSample) -> RouterDecision:
        key = prompt_hash(build_prompt(sample))
        hit = self.cache.get(key, self.model_id)
        if hit is None:
            raise RouterError(f"{sample.anchor_date}: no cached decision for prompt {key} / {self.model_id}")
        return replace(hit, anchor_date=sample.anchor_date)


class CachingRouter:
    """Persists the decisions of a deterministic router (rule, oracle) into a cache."""

    def __init__(self, router: Callable[[WindowSample], RouterDecision], cache: DecisionCache):
        self.router = router
        self.cache = cache

    def __call__(self, sample: WindowSample) -> RouterDecision:
        decision = self.router(sample)
        self.cache.put(replace(decision, timestamp=decision.timestamp or _now()))
        return decision


def route_all(
    samples: Sequence[WindowSample],
    router: Callable[[WindowSample], RouterDecision],
    concurrency: int = 1,
) -> list[RouterDecision]:
    """Route every sample, keeping input order, with at most ``concurrency`` calls in flight."""
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if concurrency == 1:
        return [router(s) for s in samples]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [pool.submit(router, s) for s in samples]
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        failed = [f for f in futures if f in done and f.exception() is not None]
        if failed:
            for f in pending:
                f.cancel()
            wait(futures)
            raise failed[0].exception()
    return [f.result() for f in futures]


def label_counts(decisions: Sequence[RouterDecision]) -> dict[str, int]:
    counts = {o.value: 0 for o in Outlook}
    for d in decisions:
        counts[d.label.value] += 1
    return counts
