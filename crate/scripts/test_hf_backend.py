"""Protocol checks for hf_backend.py against a tiny random model.

    python -m pytest scripts/test_hf_backend.py
"""

import json
import subprocess
import sys
from pathlib import Path

import pytest

pytest.importorskip("torch")
pytest.importorskip("transformers")

SCRIPT = Path(__file__).with_name("hf_backend.py")
PROMPT = "Which statement is against common sense?\nSentence 0: Café ☕ is hot.\nAnswer:"


@pytest.fixture(scope="module")
def backend():
    proc = subprocess.Popen(
        [sys.executable, str(SCRIPT), "--random-tiny", "--model-tag", "tiny", "--ig-batch", "8"],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
        encoding="utf-8",
    )

    def call(request):
        proc.stdin.write(json.dumps(request) + "\n")
        proc.stdin.flush()
        return json.loads(proc.stdout.readline())

    yield call
    proc.kill()
    proc.wait()


def tiles(text, tokens):
    cursor = 0
    for t in tokens:
        assert t["start"] == cursor and text[t["start"] : t["end"]] == t["text"]
        cursor = t["end"]
    assert cursor == len(text)


@pytest.fixture(scope="module")
def generation(backend):
    g = backend({"op": "generate", "prompt": PROMPT, "decoding": {"mode": "GREEDY", "max_new_tokens": 6}})
    assert "error" not in g, g
    return g


def test_info(backend):
    info = backend({"op": "info"})
    assert info["model_tag"] == "tiny"
    assert set(info["capabilities"]) == {"generate", "attention", "gradients", "embed"}


def test_tokens_tile_prompt_and_output(generation):
    tiles(PROMPT, generation["prompt_tokens"])
    tiles(generation["text"], generation["output_tokens"])
    assert len(generation["output_tokens"]) == 6


def test_greedy_is_repeatable(backend, generation):
    again = backend({"op": "generate", "prompt": PROMPT, "decoding": {"mode": "GREEDY", "max_new_tokens": 6}})
    assert again == generation


def test_seeded_sampling_is_repeatable(backend):
    spec = {"mode": "SAMPLE", "temperature": 1.0, "max_new_tokens": 5, "seed": 7}
    a = backend({"op": "generate", "prompt": PROMPT, "decoding": spec})
    b = backend({"op": "generate", "prompt": PROMPT, "decoding": spec})
    assert a == b


def test_attention_shape_and_causality(backend, generation):
    span = [2, 5]
    m = backend({"op": "attention", "prompt": PROMPT, "generation": generation, "answer_span": span})
    n_rows = len(generation["prompt_tokens"]) + span[1] - 1
    assert len(m["values"]) == n_rows and all(len(r) == 3 for r in m["values"])
    assert all(v >= 0 for r in m["values"] for v in r)
    n_prompt = len(generation["prompt_tokens"])
    for j, t in enumerate(range(*span)):
        # output rows at or after the target token stay zero
        assert all(m["values"][n_prompt + k][j] == 0 for k in range(t, span[1] - 1))
        assert sum(r[j] for r in m["values"]) <= 1 + 1e-6


def test_gradient_delta_shrinks_with_steps(backend, generation):
    deltas = []
    for steps in (4, 32, 128):
        m = backend(
            {"op": "gradients", "prompt": PROMPT, "generation": generation, "answer_span": [0, 2], "steps": steps}
        )
        assert "error" not in m, m
        assert all(v >= 0 for r in m["values"] for v in r)
        deltas.append(m["convergence_delta"])
    assert deltas[2] < deltas[0]


def test_embed_and_errors(backend):
    e = backend({"op": "embed", "texts": ["cats fly", "dogs bark", ""]})
    assert len(e["embeddings"]) == 3 and len(set(map(len, e["embeddings"]))) == 1
    err = backend({"op": "gradients", "prompt": PROMPT, "generation": {}, "answer_span": [0, 1], "steps": 0})
    assert err["kind"] == "invalid_request" and err["retryable"] is False
    over = backend({"op": "generate", "prompt": PROMPT, "decoding": {"mode": "GREEDY", "max_new_tokens": 10**6}})
    assert over["kind"] == "context_overflow"
