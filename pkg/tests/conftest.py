import pathlib

import pytest

from rfsel.builder import build_dataset, load_split_ids
from rfsel.conll import read_conll_dir

ROOT = pathlib.Path(__file__).resolve().parent.parent
MINICORPUS = ROOT / "data" / "minicorpus"
GOLDEN = pathlib.Path(__file__).resolve().parent / "data" / "golden"


@pytest.fixture(scope="session")
def en_docs():
    return read_conll_dir(MINICORPUS / "en", "en")


@pytest.fixture(scope="session")
def zh_docs():
    return read_conll_dir(MINICORPUS / "zh", "zh")


@pytest.fixture(scope="session")
def en_split_ids():
    return load_split_ids(MINICORPUS / "splits" / "en")


@pytest.fixture(scope="session")
def zh_split_ids():
    return load_split_ids(MINICORPUS / "splits" / "zh")


@pytest.fixture(scope="session")
def en_dataset(en_docs, en_split_ids):
    return build_dataset(en_docs, "en", en_split_ids)


@pytest.fixture(scope="session")
def zh_dataset(zh_docs, zh_split_ids):
    return build_dataset(zh_docs, "zh", zh_split_ids)


def doc_by_id(docs, suffix):
    matches = [d for d in docs if d.doc_id.endswith(suffix)]
    assert len(matches) == 1, f"no unique doc for {suffix}"
    return matches[0]
