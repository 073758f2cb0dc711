import numpy as np
import pytest

from kgnorm.kg_store import load_concepts, load_relations
from kgnorm.tokenizer import Vocab

ACCEPTANCE_LINES: list[str] = []

CONCEPTS_TSV = """\
# toy dictionary
C1\ten\tT047\tback pain
C1\tes\tT047\tdolor de espalda
C1\ten\tT047\tbackache
C2\ten\tT184\theadache
C2\ten\tT184\tcephalgia
C3\ten\tT047\tlow back pain
C3\ten\tT033\tlumbago
"""

RELATIONS_TSV = """\
C1\tCHD|is_a\tC3
C2\tRO|has_finding_site\tC1
C3\tRO|has_finding_site\tC1
"""


@pytest.fixture
def toy_files(tmp_path):
    c = tmp_path / "concepts.tsv"
    r = tmp_path / "relations.tsv"
    c.write_text(CONCEPTS_TSV, encoding="utf-8")
    r.write_text(RELATIONS_TSV, encoding="utf-8")
    return c, r


@pytest.fixture
def toy_kg(toy_files):
    d = load_concepts(toy_files[0])
    return d, load_relations(toy_files[1], d)


@pytest.fixture
def toy_vocab():
    return Vocab(["back", "pain", "##ache", "head", "low", "dolor", "de", "espalda",
                  "ce", "##ph", "##al", "##gia", "lum", "##ba", "##go"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synthetic_files(tmp_path_factory):
    from kgnorm.synthetic import generate
    return generate(seed=0).write(tmp_path_factory.mktemp("synthetic"))
