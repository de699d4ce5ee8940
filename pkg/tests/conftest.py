import time

import numpy as np
import pytest

from vlrag.backends import LocalLexicalBackend
from vlrag.index import build_index
from vlrag.pipeline import MultimodalQuery, RetrievalConfig, RetrievalPipeline
from vlrag.store import EntityRecord, EntityStore

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


class PlantedKB:
    """100 entities with distinct random embeddings and one answer-bearing passage each.

    Entity ``i`` is named ``"Qorvath{i:03d} Tower"``; its gold passage is the
    only corpus text containing the answer ``"ans{i:03d}x"``. Filler passages
    use disjoint vocabulary so the gold passage always wins lexically.
    """

    def __init__(self, n=100, dim=32, seed=7, filler=50, passage_tokens=0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.vectors = unit_rows(rng, n, dim)
        self.ids = [1000 + i for i in range(n)]
        self.records = [
            EntityRecord(
                id=self.ids[i],
                entity_name=f"Qorvath{i:03d} Tower",
                description=f"landmark number q{i:03d} in the old city",
                image_ref=f"img/{i:03d}.jpg",
            )
            for i in range(n)
        ]
        self.answers = [f"ans{i:03d}x" for i in range(n)]
        padding = " ".join(f"pad{j}" for j in range(passage_tokens))
        passages = []
        for i in range(n):
            text = f"Qorvath{i:03d} Tower was designed by ans{i:03d}x in the old city."
            if padding:
                text = f"{text} {padding}"
            passages.append((i, text))
        for j in range(filler):
            passages.append((n + j, f"unrelated filler text about weather number w{j}"))
        self.passages = passages
        self.store = EntityStore(self.records)
        self.index = build_index(self.ids, self.vectors)
        self.backend = LocalLexicalBackend(passages)

    def pipeline(self, **config):
        return RetrievalPipeline(self.index, self.store, self.backend, RetrievalConfig(**config))

    def query(self, i, text="Who designed the tallest building in the picture?"):
        return MultimodalQuery(text=text, image_embedding=self.vectors[i], image_ref=f"query/{i:03d}.jpg")


@pytest.fixture(scope="session")
def planted_kb():
    return PlantedKB()


@pytest.fixture(scope="session")
def ann_dataset():
    """10k unit vectors (d=64), 100 unit queries, a default-params index and its build time."""
    rng = np.random.default_rng(2024)
    data = unit_rows(rng, 10_000, 64)
    queries = unit_rows(rng, 100, 64)
    start = time.perf_counter()
    index = build_index(range(10_000), data)
    return data, queries, index, time.perf_counter() - start


@pytest.fixture
def report():
    def record(criterion, passed, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}".rstrip())
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record
