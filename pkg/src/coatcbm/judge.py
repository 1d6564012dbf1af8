"""Optional HTTP relevance judge speaking a chat-completions style protocol.

Never needed by the test-suite proper; the table oracle is the default.
The bearer token is read from the environment variable named in the
config and is never logged.
"""

import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .errors import DataError, JudgeError

logger = logging.getLogger(__name__)

IMAGE_PROMPT = (
    "Image description: {subject}\n"
    "Is the visual concept \"{concept}\" present in or relevant to this image? Answer yes or no."
)
CLASS_PROMPT = (
    "Category: {subject}\n"
    "Is the visual concept \"{concept}\" characteristic of this category? Answer yes or no."
)

_ANSWER = re.compile(r"^\W*(yes|no)\W*$", re.IGNORECASE)


@dataclass
class JudgeEndpoint:
    url: str
    model: str
    token_env: str = "JUDGE_API_TOKEN"
    image_template: str = IMAGE_PROMPT
    class_template: str = CLASS_PROMPT
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5
    min_interval: float = 0.0

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
            return cls(**data)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"bad judge config {path}: {exc}") from exc


def parse_answer(text):
    m = _ANSWER.match(text or "")
    if not m:
        raise JudgeError(f"unparseable judge answer: {text!r}")
    return m.group(1).lower() == "yes"


class RemoteJudge:
    """Serialised, cached, retrying client; ``ask`` returns a bool."""

    def __init__(self, endpoint, sleep=time.sleep):
        self.endpoint = endpoint
        self.cache = {}
        self.calls = 0
        self._lock = threading.Lock()
        self._last = 0.0
        self._sleep = sleep

    def _prompt(self, kind, subject, concept):
        tpl = self.endpoint.image_template if kind == "image" else self.endpoint.class_template
        return tpl.format(subject=subject, concept=concept)

    def _post(self, prompt):
        ep = self.endpoint
        body = json.dumps({
            "model": ep.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        }).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(ep.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(ep.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=ep.timeout) as resp:
            payload = json.loads(resp.read().decode())
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise JudgeError(f"unexpected judge response shape: {payload!r}") from exc

    def ask(self, kind, subject, concept):
        key = (kind, subject, concept)
        with self._lock:
            if key in self.cache:
                return self.cache[key]
            prompt = self._prompt(kind, subject, concept)
            ep = self.endpoint
            for attempt in range(ep.max_retries + 1):
                wait = ep.min_interval - (time.monotonic() - self._last)
                if wait > 0:
                    self._sleep(wait)
                self._last = time.monotonic()
                self.calls += 1
                try:
                    reply = self._post(prompt)
                    break
                except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
                    if isinstance(exc, urllib.error.HTTPError) and exc.code < 500 and exc.code != 429:
                        raise JudgeError(f"judge rejected request: HTTP {exc.code}") from exc
                    if attempt == ep.max_retries:
                        raise JudgeError(f"judge unreachable after {attempt + 1} attempts: {exc}") from exc
                    logger.warning("judge request failed (%s), retrying", type(exc).__name__)
                    self._sleep(ep.backoff * 2**attempt)
            answer = parse_answer(reply)
            self.cache[key] = answer
            return answer


def judge_remote(judge, subject, concept, kind="class"):
    return judge.ask(kind, subject, concept)
