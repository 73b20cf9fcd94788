from __future__ import annotations

import json
from pathlib import Path

import pytest

from afcbench.corpus import QuestionRecord
from afcbench.gateway import LlmGateway, ResponseCache, ScriptedBackend

FIXTURES = Path(__file__).parent / "fixtures"


def scripted_gateway(
    table: dict,
    cache_root=None,
    max_in_flight: int = 4,
    delay: float = 0.0,
) -> tuple[LlmGateway, ScriptedBackend]:
    backend = ScriptedBackend(table, delay=delay)
    cache = ResponseCache(cache_root) if cache_root else None
    return LlmGateway(backend, cache=cache, max_in_flight=max_in_flight), backend


@pytest.fixture
def record() -> QuestionRecord:
    return QuestionRecord(
        id="q1",
        question="Which mineral is found in the Harlen Caves?",
        answer="fluorite",
        context=(
            "The Harlen Caves lie beneath the Vel Mountains and stay near freezing all year. "
            "The mineral found in the Harlen Caves is fluorite."
        ),
        dataset_name="unit-test",
    )


@pytest.fixture
def afc_text() -> str:
    return "The Harlen Caves lie beneath the Vel Mountains and stay near freezing all year."


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path
