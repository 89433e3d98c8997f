"""LLM client abstraction: a network client plus deterministic stand-ins.

The wire format is a JSON request {"model", "temperature", "prompt"} posted
to the configured endpoint; the response body is the completion text. The
credential is read from an environment variable and never logged or
persisted.

Two offline implementations exist: ScriptedLlmClient replays canned
responses (tests), and StubLlmClient derives a schema-valid response from
the prompt's own statistics block, so the whole pipeline runs offline and
byte-reproducibly.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Protocol

import requests

from .errors import ConfigError, LlmClientError

ENDPOINT_ENV = "TRIDRIVE_LLM_ENDPOINT"
KEY_ENV = "TRIDRIVE_LLM_KEY"


@dataclass
class LlmClientConfig:
    endpoint: str = ""
    model: str = "default"
    temperature: float = 0.7
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 1.0

    def __post_init__(self):
        if self.retries < 0:
            raise ConfigError("retries must be nonnegative")
        if self.backoff < 0:
            raise ConfigError("backoff must be nonnegative")


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str:  # pragma: no cover - interface
        ...


class HttpLlmClient:
    """POSTs prompts to an HTTP endpoint and returns the response body."""

    def __init__(self, config: LlmClientConfig):
        self.config = config
        endpoint = config.endpoint or os.environ.get(ENDPOINT_ENV, "")
        if not endpoint:
            raise ConfigError(
                f"no LLM endpoint configured (set {ENDPOINT_ENV} or the config's endpoint)"
            )
        self.endpoint = endpoint

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "prompt": prompt,
        }
        headers = {}
        key = os.environ.get(KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error = None
        for attempt in range(self.config.retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.config.timeout
                )
                if resp.status_code >= 500:
                    last_error = f"server returned {resp.status_code}"
                elif resp.status_code >= 400:
                    raise LlmClientError(f"request rejected with {resp.status_code}")
                else:
                    return resp.text
            except requests.RequestException as exc:
                last_error = str(exc)
            if attempt < self.config.retries:
                time.sleep(min(self.config.backoff * 2.0**attempt, 8.0))
        raise LlmClientError(f"LLM endpoint failed after {self.config.retries + 1} attempts: {last_error}")


class ScriptedLlmClient:
    """Replays a fixed list of responses, cycling when exhausted."""

    def __init__(self, responses: list[str], cycle: bool = True):
        if not responses:
            raise ConfigError("ScriptedLlmClient needs at least one response")
        self.responses = list(responses)
        self.cycle = cycle
        self.calls = 0

    def complete(self, prompt: str) -> str:
        i = self.calls
        self.calls += 1
        if i >= len(self.responses):
            if not self.cycle:
                raise LlmClientError("scripted client ran out of responses")
            i %= len(self.responses)
        return self.responses[i]


# ---------------------------------------------------------------------------
# Heuristic offline stub. It reads the statistics embedded in the prompt and
# answers with a plausible, always-valid document. Responses vary
# deterministically with an internal call counter so repeated candidate
# generation yields a diverse pool.
# ---------------------------------------------------------------------------

_TOP_K_RE = re.compile(r"top (\d+)")
_FEATURE_BLOCK_RE = re.compile(
    r"^Feature: (?P<fid>\S+)\n"
    r"  Count: (?P<count>\d+)\n"
    r"  Mean: (?P<mean>[-\d.]+)\n"
    r"  Std: (?P<std>[-\d.]+)\n"
    r"  Missing rate: (?P<missing>[-\d.]+)\n"
    r"  Median: (?P<median>[-\d.]+)  Q25: (?P<q25>[-\d.]+)  Q75: (?P<q75>[-\d.]+)  IQR: (?P<iqr>[-\d.]+)$",
    re.MULTILINE,
)
_CORR_LINE_RE = re.compile(r"^  - (?P<fid>\S+): r=(?P<r>[-+\d.]+|undefined)", re.MULTILINE)
_ACTION_DIM_RE = re.compile(r"^- (?P<aid>\S+): 0\.\.(?P<max>[\d.]+)", re.MULTILINE)


@dataclass
class StubLlmClient:
    """Deterministic offline designer; see module docstring."""

    generation_calls: int = field(default=0)

    def complete(self, prompt: str) -> str:
        if '"critical_state_features"' in prompt:
            return self._select_features(prompt)
        if '"confidence_tau"' in prompt:
            call = self.generation_calls
            self.generation_calls += 1
            return self._design_reward(prompt, call)
        raise LlmClientError("stub client does not recognize this prompt")

    def _select_features(self, prompt: str) -> str:
        k_match = _TOP_K_RE.search(prompt)
        k = int(k_match.group(1)) if k_match else 7
        stats = {m.group("fid"): m.groupdict() for m in _FEATURE_BLOCK_RE.finditer(prompt)}
        outcome_r, action_r = self._split_correlations(prompt)
        ranked = sorted(
            stats,
            key=lambda fid: (
                -(abs(outcome_r.get(fid, 0.0)) - 0.5 * abs(action_r.get(fid, 0.0))
                  - 0.2 * float(stats[fid]["missing"])),
                fid,
            ),
        )
        chosen = ranked[:k]
        entries = [
            {
                "feature_name": fid,
                "rationale": (
                    f"survival correlation {outcome_r.get(fid, 0.0):+.3f} "
                    f"with missing rate {float(stats[fid]['missing']):.2f}"
                ),
            }
            for fid in chosen
        ]
        return json.dumps({"critical_state_features": entries})

    def _split_correlations(self, prompt: str):
        outcome_r: dict[str, float] = {}
        action_r: dict[str, float] = {}
        section = None
        for line in prompt.splitlines():
            if line.startswith("CORRELATIONS WITH OUTCOMES"):
                section = "outcome"
            elif line.startswith("ACTION-FEATURE CORRELATIONS"):
                section = "action"
            elif section and line.startswith("  - "):
                m = _CORR_LINE_RE.match(line)
                if not m or m.group("r") == "undefined":
                    continue
                fid, r = m.group("fid"), float(m.group("r"))
                if section == "outcome":
                    outcome_r[fid] = r
                else:
                    action_r[fid] = max(abs(r), action_r.get(fid, 0.0))
        return outcome_r, action_r

    def _design_reward(self, prompt: str, call: int) -> str:
        stats = {m.group("fid"): m.groupdict() for m in _FEATURE_BLOCK_RE.finditer(prompt)}
        if not stats:
            raise LlmClientError("stub client found no feature statistics in the prompt")
        survival = {}
        confidence_tau = {}
        for fid in sorted(stats):
            median = float(stats[fid]["median"])
            iqr = float(stats[fid]["iqr"])
            if median < 0.35:
                survival[fid] = {
                    "form": "decay_low",
                    "tau": round(0.3 * (1.0 + 0.15 * (call % 3)), 6),
                    "weight": 1.0,
                }
            elif median > 0.65:
                survival[fid] = {
                    "form": "decay_high",
                    "tau": round(0.3 * (1.0 + 0.15 * (call % 3)), 6),
                    "weight": 1.0,
                }
            else:
                survival[fid] = {
                    "form": "bell",
                    "mu": round(median, 6),
                    "sigma": round(max(iqr / 2.0, 0.05) * (1.0 + 0.1 * (call % 4)), 6),
                    "weight": 1.0,
                }
            confidence_tau[fid] = round(6.0 * (1.0 + 0.25 * (call % 4)), 6)
        action_max = {
            m.group("aid"): float(m.group("max")) for m in _ACTION_DIM_RE.finditer(prompt)
        }
        spec = {
            "survival": survival,
            "confidence_tau": confidence_tau,
            "action_max": action_max,
            "decay_half_life": 48.0 * (1.0 + 0.25 * (call % 3)),
            "gamma": 0.99,
            "lambda": (0.0, 0.05, 0.1, 0.2)[call % 4],
            "action_cost_scale": 0.25,
        }
        return json.dumps(spec)
