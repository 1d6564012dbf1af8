import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from coatcbm.errors import JudgeError
from coatcbm.judge import JudgeEndpoint, RemoteJudge, parse_answer


class MockServer:
    """Replies from a queue of (status, content) pairs; records headers and prompts."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((dict(self.headers), body))
                status, content = outer.replies.pop(0) if len(outer.replies) > 1 else outer.replies[0]
                payload = json.dumps({"choices": [{"message": {"content": content}}]}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_port}/v1/chat/completions"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def judge_for(server, **kw):
    return RemoteJudge(JudgeEndpoint(url=server.url, model="m", **kw), sleep=lambda s: None)


@pytest.mark.parametrize("text,ans", [("yes", True), ("No.", False), (" YES! ", True)])
def test_parse_answer(text, ans):
    assert parse_answer(text) is ans


@pytest.mark.parametrize("text", ["maybe", "yes and no", "", None])
def test_parse_answer_rejects(text):
    with pytest.raises(JudgeError):
        parse_answer(text)


def test_yes_answer_and_cache():
    with MockServer([(200, "Yes")]) as srv:
        judge = judge_for(srv)
        assert judge.ask("class", "apple", "red") is True
        assert judge.ask("class", "apple", "red") is True
        assert judge.calls == 1
        assert len(srv.requests) == 1
        prompt = srv.requests[0][1]["messages"][0]["content"]
        assert "apple" in prompt and "red" in prompt


def test_garbage_answer_errors():
    with MockServer([(200, "I think so")]) as srv:
        with pytest.raises(JudgeError):
            judge_for(srv).ask("image", "a photo", "red")


def test_retries_after_server_error():
    with MockServer([(500, ""), (503, ""), (200, "no")]) as srv:
        judge = judge_for(srv, max_retries=3)
        assert judge.ask("image", "a photo", "red") is False
        assert judge.calls == 3


def test_gives_up_after_max_retries():
    with MockServer([(500, "")]) as srv:
        with pytest.raises(JudgeError, match="after 3 attempts"):
            judge_for(srv, max_retries=2).ask("image", "x", "y")


def test_client_error_not_retried():
    with MockServer([(400, "")]) as srv:
        judge = judge_for(srv)
        with pytest.raises(JudgeError, match="HTTP 400"):
            judge.ask("image", "x", "y")
        assert judge.calls == 1


def test_token_sent_but_never_logged(monkeypatch, caplog):
    secret = "sk-test-very-secret"
    monkeypatch.setenv("MOCK_JUDGE_TOKEN", secret)
    caplog.set_level(logging.DEBUG)
    with MockServer([(500, ""), (200, "yes")]) as srv:
        judge_for(srv, token_env="MOCK_JUDGE_TOKEN").ask("class", "cat", "furry")
        assert srv.requests[-1][0]["Authorization"] == f"Bearer {secret}"
    assert caplog.records  # the retry was logged
    assert secret not in caplog.text


def test_endpoint_from_json(tmp_path):
    from coatcbm.errors import DataError

    (tmp_path / "j.json").write_text(json.dumps({"url": "http://x", "model": "m", "timeout": 5}))
    assert JudgeEndpoint.from_json(tmp_path / "j.json").timeout == 5
    (tmp_path / "bad.json").write_text(json.dumps({"url": "http://x", "model": "m", "colour": 1}))
    with pytest.raises(DataError):
        JudgeEndpoint.from_json(tmp_path / "bad.json")
