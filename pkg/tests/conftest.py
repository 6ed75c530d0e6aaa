"""Shared fixtures: tiny images, deterministic backend doubles."""

from __future__ import annotations

import io
import json
import re
from pathlib import Path

import pytest
from PIL import Image

from poca.backends import BackendConfig, Client, FunctionBackend

GOLDEN_DIR = Path(__file__).parent / "golden"


def make_png(width: int, height: int, color=(120, 40, 200)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def image_file(tmp_path):
    """A 100x60 PNG on disk."""
    path = tmp_path / "img.png"
    path.write_bytes(make_png(100, 60))
    return path


def write_manifest(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


MOCK_CFG = BackendConfig(endpoint_url="mock://test", model_id="test-model")


def _user_text(body: dict) -> str:
    for message in body.get("messages", ()):
        if message.get("role") != "user":
            continue
        content = message["content"]
        if isinstance(content, str):
            return content
        for part in content:
            if part.get("type") == "text":
                return part["text"]
    return ""


def _system_text(body: dict) -> str:
    for message in body.get("messages", ()):
        if message.get("role") == "system" and isinstance(message.get("content"), str):
            return message["content"]
    return ""


def scripted_pipeline_rules(body: dict) -> str:
    """Deterministic captioner + merger behavior for pipeline tests.

    Captions name the region they were asked about (derived from the
    image payload size, which differs per patch); merges echo all five
    input captions joined, so merge output is a pure function of inputs.
    """
    if "merged global caption" in _system_text(body):
        user = _user_text(body)
        sections = re.findall(r"^### [^:]+: (.*)$", user, flags=re.MULTILINE)
        return "Here's the merged caption: " + " | ".join(sections)
    # caption request: key on the attached image bytes
    for message in body["messages"]:
        content = message["content"]
        if isinstance(content, list):
            for part in content:
                if part.get("type") == "image_url":
                    url = part["image_url"]["url"]
                    tag = f"{len(url)}"
                    return f"caption of payload {tag}"
    raise AssertionError(f"unexpected request: {json.dumps(body)[:200]}")


@pytest.fixture
def pipeline_clients():
    """(captioner, merger) clients over one scripted function transport."""
    transport = FunctionBackend(scripted_pipeline_rules)
    captioner = Client(MOCK_CFG, transport=transport)
    merger = Client(MOCK_CFG, transport=transport)
    return captioner, merger, transport
