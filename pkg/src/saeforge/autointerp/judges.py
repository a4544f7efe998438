"""Judges that explain a latent from examples and predict which sequences activate it."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from importlib import resources
from typing import Optional, Protocol

import httpx
import numpy as np

log = logging.getLogger(__name__)

HIGHLIGHT = re.compile(r"<<(.+?)>>")


class JudgeError(RuntimeError):
    """The judge could not produce an answer (after retries, for remote judges)."""


class Judge(Protocol):
    def propose(self, examples: list[str]) -> str: ...

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]: ...


def load_prompts() -> dict:
    return json.loads(resources.files("saeforge.assets").joinpath("judge_prompts.json").read_text())


class KeywordJudge:
    """Explanation = the highlighted tokens seen in the examples; a sequence is
    predicted to activate if it contains any of them."""

    def propose(self, examples: list[str]) -> str:
        toks = sorted({t for ex in examples for t in HIGHLIGHT.findall(ex)})
        return " ".join(toks)

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]:
        keys = set(explanation.split())
        return [bool(keys & set(s.split())) for s in sequences]


class AlwaysJudge:
    def propose(self, examples: list[str]) -> str:
        return "everything"

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]:
        return [True] * len(sequences)


class RandomJudge:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def propose(self, examples: list[str]) -> str:
        return "coin flip"

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]:
        return (self.rng.random(len(sequences)) < 0.5).tolist()


class OracleJudge:
    """Answers with the hidden flags. The pipeline hands every judge the
    test set through ``prepare`` before ``detect``; only this one reads it."""

    def __init__(self):
        self._flags: Optional[list[bool]] = None

    def prepare(self, test_set) -> None:
        self._flags = list(test_set.flags)

    def propose(self, examples: list[str]) -> str:
        return "oracle"

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]:
        if self._flags is None or len(self._flags) != len(sequences):
            raise JudgeError("oracle judge was not prepared with this test set")
        return self._flags


def parse_indices(text: str, n: int) -> list[bool]:
    """Read 1-based sequence numbers from a reply; 'None' or no numbers = none."""
    out = [False] * n
    for m in re.findall(r"\d+", text):
        i = int(m)
        if 1 <= i <= n:
            out[i - 1] = True
    return out


class RemoteJudge:
    """Chat-completion endpoint judge (OpenAI-compatible request shape)."""

    def __init__(self, base_url: str, model: str, api_key_env: str = "OPENAI_API_KEY", max_retries: int = 3,
                 backoff: float = 1.0, timeout: float = 60.0, client: Optional[httpx.Client] = None):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.prompts = load_prompts()

    @property
    def prompt_version(self) -> str:
        return self.prompts["version"]

    def _chat(self, system: str, user: str) -> str:
        key = os.environ.get(self.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        body = {"model": self.model, "temperature": 0.0,
                "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}]}
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                r = self.client.post(self.url, json=body, headers=headers)
                if r.status_code == 429 or r.status_code >= 500:
                    last = JudgeError(f"HTTP {r.status_code}")
                elif r.status_code >= 400:
                    raise JudgeError(f"HTTP {r.status_code}: {r.text[:200]}")
                else:
                    return r.json()["choices"][0]["message"]["content"]
            except httpx.HTTPError as e:
                last = e
            except (KeyError, IndexError, ValueError) as e:
                raise JudgeError(f"malformed response: {e}") from e
            if attempt < self.max_retries:
                time.sleep(self.backoff * 2**attempt)
        raise JudgeError(f"judge unreachable after {self.max_retries + 1} attempts: {last}")

    def propose(self, examples: list[str]) -> str:
        p = self.prompts["propose"]
        return self._chat(p["system"], p["user"].format(examples="\n".join(examples))).strip()

    def detect(self, explanation: str, sequences: list[str]) -> list[bool]:
        p = self.prompts["detect"]
        listing = "\n".join(f"{i + 1}. {s}" for i, s in enumerate(sequences))
        reply = self._chat(p["system"], p["user"].format(explanation=explanation, sequences=listing))
        return parse_indices(reply, len(sequences))
