import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PlantedKB
from vlrag.backends import API_KEY_ENV, LocalLexicalBackend, RemoteSearchBackend, ScoredPassage, TextRetrieverBackend
from vlrag.errors import AlignmentError, BackendError
from vlrag.index import build_index
from vlrag.pipeline import (
    KnowledgeSnippet,
    MultimodalQuery,
    RetrievalConfig,
    RetrievalPipeline,
    expand_query,
    retrieve,
    stage1_retrieve,
    stage2_retrieve,
    truncate_passage,
    write_snippets,
)
from vlrag.store import EntityRecord, EntityStore
from vlrag.text import count_tokens

QUESTION = "Who designed the tallest building in the picture?"
WTC = EntityRecord(1, "One World Trade Center", "skyscraper in Lower Manhattan")


def test_expand_query_template():
    assert expand_query(QUESTION, WTC) == (
        "One World Trade Center. skyscraper in Lower Manhattan. Who designed the tallest building in the picture?"
    )
    assert expand_query(QUESTION, EntityRecord(2, "Big Ben")) == f"Big Ben. {QUESTION}"
    assert expand_query("q", EntityRecord(3, "  Mt.   Fuji ", "A volcano!")) == "Mt. Fuji. A volcano! q"


def test_expand_query_caps_long_description():
    desc = " ".join(f"w{i}" for i in range(10_000))
    out = expand_query(QUESTION, EntityRecord(4, "Tower Bridge", desc))
    assert count_tokens(out) == 512
    assert out.endswith(QUESTION)
    assert out.startswith("Tower Bridge. w0 w1")


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1).filter(str.strip), st.text(min_size=1).filter(str.strip), st.text(),
       st.integers(1, 40))
def test_expand_query_ends_with_q(q, name, desc, limit):
    out = expand_query(q, EntityRecord(5, name, desc), max_tokens=limit)
    assert out.endswith(q)
    assert count_tokens(out) <= max(limit, count_tokens(q))


def test_lexical_hand_scores():
    backend = LocalLexicalBackend([
        (0, "nothing relevant here"),
        (1, "alpha beta gamma"),
        (2, "alpha beta gamma delta epsilon"),
        (3, "Gamma, beta and ALPHA!"),
    ])
    query = "alpha beta gamma delta epsilon"
    assert backend.score_all(query) == {1: 3, 2: 5, 3: 3}
    hits = backend.search(query, 10)
    assert [h.text for h in hits] == [
        "alpha beta gamma delta epsilon", "alpha beta gamma", "Gamma, beta and ALPHA!"
    ]
    assert [h.score for h in hits] == [5.0, 3.0, 3.0]
    assert len(backend.search(query, 2)) == 2


def test_lexical_unique_entity_match():
    backend = LocalLexicalBackend([(0, "a river"), (1, "Eiffel tower facts"), (2, "a mountain")])
    assert stage2_retrieve(backend, expand_query("what?", EntityRecord(1, "Eiffel")), 3)[0].text == "Eiffel tower facts"


def test_truncate_passage():
    short = " ".join(["x"] * 50)
    assert truncate_passage(short) == short
    words = [f"t{i}" for i in range(401)]
    long = "  ".join(words) + "\n"
    cut = truncate_passage(long)
    assert cut.split() == words[:400]
    assert long.startswith(cut)
    assert truncate_passage("a b c", 2) == "a b"


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.sampled_from("ab \n\t.,"), max_size=200), st.integers(1, 30))
def test_truncate_idempotent(text, limit):
    once = truncate_passage(text, limit)
    assert truncate_passage(once, limit) == once
    assert count_tokens(once) <= limit
    assert text.startswith(once)


def test_stage1_planted(planted_kb):
    hits = stage1_retrieve(planted_kb.index, planted_kb.store, planted_kb.query(42), 3)
    assert hits[0][0].id == 1042
    assert hits[0][1] == pytest.approx(1.0, abs=1e-6)
    assert [h[0].id for h in hits] == [h.id for h in planted_kb.index.search(planted_kb.vectors[42], 3)]


def test_k_saturates_on_small_store():
    vecs = np.eye(2, dtype=np.float32)
    store = EntityStore([EntityRecord(0, "A"), EntityRecord(1, "B")])
    index = build_index([0, 1], vecs)
    out = retrieve(index, store, LocalLexicalBackend([(0, "A text")]), MultimodalQuery("q", vecs[0]))
    assert [s.entity.id for s in out] == [0, 1]


def test_retrieve_defaults():
    kb = PlantedKB(n=20, passage_tokens=600, seed=3)
    snippets = kb.pipeline().retrieve(kb.query(5))
    assert len(snippets) == 3
    for snip in snippets:
        assert len(snip.passages) <= 3
        assert all(count_tokens(p) <= 400 for p in snip.passages)
    assert any("ans005x" in p for p in snippets[0].passages)


def test_retrieve_is_deterministic(planted_kb):
    pipe = planted_kb.pipeline()
    a = [s.to_dict() for s in pipe.retrieve(planted_kb.query(9))]
    b = [s.to_dict() for s in planted_kb.pipeline(max_in_flight=1).retrieve(planted_kb.query(9))]
    assert a == b


class EmptyBackend(TextRetrieverBackend):
    def search(self, query, l):
        return []


class FlakyBackend(TextRetrieverBackend):
    def __init__(self, bad_word):
        self.bad_word = bad_word

    def search(self, query, l):
        if self.bad_word in query:
            raise ConnectionError("boom")
        return [ScoredPassage("ok " + query.split(".")[0], 1.0)]


def test_degraded_modes(planted_kb):
    query = planted_kb.query(3)
    out = retrieve(planted_kb.index, planted_kb.store, EmptyBackend(), query, RetrievalConfig(k=1))
    assert len(out) == 1 and out[0].passages == () and out[0].backend_error is None

    out = retrieve(planted_kb.index, planted_kb.store, FlakyBackend("Qorvath003"), query)
    assert out[0].passages == () and "boom" in out[0].backend_error
    assert all(s.passages and s.backend_error is None for s in out[1:])
    with pytest.raises(BackendError):
        stage2_retrieve(FlakyBackend("x"), "x", 1)


def test_alignment_check(planted_kb):
    store = EntityStore(list(planted_kb.store)[:-1])
    with pytest.raises(AlignmentError):
        RetrievalPipeline(planted_kb.index, store, planted_kb.backend)


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(k=0)
    with pytest.raises(ValueError):
        MultimodalQuery(" ", [1.0, 0.0])


def test_snippet_export(planted_kb):
    import io

    snippets = planted_kb.pipeline().retrieve(planted_kb.query(1))
    buf = io.StringIO()
    assert write_snippets(snippets, buf) == 3
    lines = buf.getvalue().splitlines()
    back = [KnowledgeSnippet.from_dict(json.loads(line)) for line in lines]
    assert back == snippets
    assert json.loads(lines[0])["entity_name"] == "Qorvath001 Tower"


class _Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("X-API-KEY")))
        status, payload = type(self).script.pop(0) if type(self).script else (200, [])
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def search_server():
    _Handler.script, _Handler.seen = [], []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/search", _Handler
    server.shutdown()
    server.server_close()


def test_remote_backend_success(search_server, monkeypatch):
    url, handler = search_server
    monkeypatch.setenv(API_KEY_ENV, "secret")
    handler.script = [(200, [{"text": "one", "score": 2}, {"text": " ", "score": 1},
                             {"text": "two", "score": 0.5}, {"text": "three", "score": 0.1}])]
    hits = RemoteSearchBackend(url).search("Eiffel. tower", 2)
    assert hits == [ScoredPassage("one", 2.0), ScoredPassage("two", 0.5)]
    assert handler.seen == [({"query": "Eiffel. tower", "num_results": 2}, "secret")]


def test_remote_backend_retries(search_server):
    url, handler = search_server
    sleeps = []
    handler.script = [(503, {}), (429, {}), (200, [{"text": "late", "score": 1}])]
    backend = RemoteSearchBackend(url, sleep=sleeps.append, backoff=0.5)
    assert backend.search("q", 3) == [ScoredPassage("late", 1.0)]
    assert sleeps == [0.5, 1.0]

    handler.script = [(500, {})] * 3
    with pytest.raises(BackendError):
        backend.search("q", 3)
    handler.script = [(404, {})]
    with pytest.raises(BackendError):
        backend.search("q", 3)
    assert len(handler.seen) == 3 + 3 + 1


def test_remote_backend_unreachable_degrades(planted_kb):
    backend = RemoteSearchBackend("http://127.0.0.1:9/none", timeout=0.5, retries=1, sleep=lambda s: None)
    out = retrieve(planted_kb.index, planted_kb.store, backend, planted_kb.query(0), RetrievalConfig(k=2))
    assert [s.entity.id for s in out][0] == 1000
    assert all(s.passages == () and s.backend_error for s in out)
