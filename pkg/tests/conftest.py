import pytest
from hypothesis import settings

from rebalance.config import ModelConfig
from rebalance.synthetic import make_corpus
from rebalance.tokenizer import segment

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=12, input_dim=4, output_dim=6, hidden=8, layers=1, heads=2,
                ffn_dim=16, max_positions=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def synthetic():
    corp = make_corpus(60, words_per_lang=20, min_len=3, max_len=5, seed=1)
    v = corp.vocab()
    corpora = {l: [segment(s, v) for s in corp.sentences(l)] for l in corp.langs}
    return corp, v, corpora


def random_ids(rng, v, b, t):
    ids = rng.integers(5, v, size=(b, t))
    ids[:, 0] = 2
    return ids


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        ok = ok and prev[0]
        detail = f"{prev[1]}; {detail}"
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
