"""Prompt augmentation: clue generation by a frozen base model + template assembly.

Two-pass inference: a base-model client describes the input image(s) under a
fixed guide prompt, and the resulting clue text is merged with the task
instruction through a fixed template. Augmentation is inference-time only;
any client failure degrades to the bare task instruction.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass

import requests

from .data import VisualInput

GUIDE_PROMPT = "Please describe the remote sensing image(s) in detail"
CONTEXT_SENTINEL = "Context: "
TIMEOUT_ENV_VAR = "BTCC_PA_TIMEOUT_SECS"
DEFAULT_TIMEOUT_SECS = 30.0


class PromptError(ValueError):
    """Raised for unusable instructions (empty, or already augmented)."""


class AugmentationUnavailableError(RuntimeError):
    """Raised when the base model cannot produce clues; callers fall back to P_t."""


@dataclass
class PromptBundle:
    """Everything the augmentation pass produced for one sample."""

    guide: str
    clues: str
    task: str
    assembled: str


def payload_key(payloads: list[bytes]) -> str:
    """Mock lookup key: sha256 over the concatenated payload bytes."""
    h = hashlib.sha256()
    for p in payloads:
        h.update(p)
    return h.hexdigest()


class MockBaseModelClient:
    """Deterministic stand-in keyed by input hash.

    The mapping may be keyed by payload_key(...) digests or, for convenience,
    by a caller-supplied hint such as a sample id. Identical inputs always
    return identical text; unknown inputs raise AugmentationUnavailableError.
    """

    def __init__(self, mapping: dict[str, str]):
        self.mapping = dict(mapping)

    @classmethod
    def from_json_file(cls, path) -> "MockBaseModelClient":
        with open(path, "r", encoding="utf-8") as fh:
            mapping = json.load(fh)
        if not isinstance(mapping, dict):
            raise ValueError(f"mock clue file {path} must hold a JSON object")
        return cls(mapping)

    def describe(self, prompt: str, payloads: list[bytes], key_hint: str | None = None) -> str:
        for key in filter(None, (key_hint, payload_key(payloads))):
            if key in self.mapping:
                return self.mapping[key]
        raise AugmentationUnavailableError("mock client has no clue for this input")


class HttpBaseModelClient:
    """Minimal chat-completion client: POST {"prompt", "images": [base64...]},
    expect {"text": ...} back. One retry; timeout from BTCC_PA_TIMEOUT_SECS
    (seconds) unless given explicitly."""

    def __init__(self, url: str, timeout: float | None = None, retries: int = 1, session=None):
        self.url = url
        if timeout is None:
            timeout = float(os.environ.get(TIMEOUT_ENV_VAR, DEFAULT_TIMEOUT_SECS))
        self.timeout = timeout
        self.retries = retries
        self.session = session or requests.Session()

    def describe(self, prompt: str, payloads: list[bytes], key_hint: str | None = None) -> str:
        body = {
            "prompt": prompt,
            "images": [base64.b64encode(p).decode("ascii") for p in payloads],
        }
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = self.session.post(self.url, json=body, timeout=self.timeout)
                resp.raise_for_status()
                text = resp.json()["text"]
                if not isinstance(text, str):
                    raise ValueError(f"endpoint returned non-string text: {text!r}")
                return text
            except (requests.RequestException, ValueError, KeyError) as exc:
                last_error = exc
        raise AugmentationUnavailableError(f"base model endpoint failed: {last_error}")


def generate_clues(visual: VisualInput, client, key_hint: str | None = None) -> str:
    """First augmentation pass: send the guide prompt with the image payloads,
    return the clue text stripped of surrounding whitespace."""
    return client.describe(GUIDE_PROMPT, visual.payloads(), key_hint=key_hint).strip()


def assemble_prompt(clues: str, task: str) -> str:
    """Fixed template: "Context: {clues}\\nInstruction: {task}"; bare task when
    there are no clues. Rejects empty tasks and already-augmented inputs."""
    if not task or not task.strip():
        raise PromptError("task instruction must be non-empty")
    if task.startswith(CONTEXT_SENTINEL) or clues.startswith(CONTEXT_SENTINEL):
        raise PromptError("input already carries an assembled prompt")
    if not clues:
        return task
    return f"{CONTEXT_SENTINEL}{clues}\nInstruction: {task}"


def augmented_prompt(visual: VisualInput, task: str, client, key_hint: str | None = None) -> PromptBundle:
    """Full augmentation pass with fallback: on any client failure the
    assembled prompt is exactly the task instruction."""
    if not task or not task.strip():
        raise PromptError("task instruction must be non-empty")
    try:
        clues = generate_clues(visual, client, key_hint=key_hint)
        assembled = assemble_prompt(clues, task)
    except AugmentationUnavailableError:
        return PromptBundle(GUIDE_PROMPT, "", task, task)
    return PromptBundle(GUIDE_PROMPT, clues, task, assembled)
