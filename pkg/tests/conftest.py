import numpy as np
import pytest

from tailtransfer import rqvae
from tailtransfer import synthdata as sd
from tailtransfer import trainer as tr

TINY = sd.DataConfig(num_users=200, num_items=120, num_events=5000, num_days=6, num_categories=5)


@pytest.fixture(scope="session")
def tiny_dataset():
    return sd.generate_dataset(TINY, 0)


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    ds = tiny_dataset
    qc = rqvae.QuantizerConfig(levels=2, codebook_size=4, epochs=5)
    model, _ = rqvae.train_rqvae(ds.items.content_rep, qc, seed=0)
    item_ids = rqvae.assign_semantic_ids(ds.items.content_rep, model).ids
    # coarse user ids are enough to exercise the cluster machinery
    user_ids = np.random.default_rng(0).integers(0, 3, (len(ds.users), 2))
    return tr.prepare_data(ds, user_ids, item_ids, seq_len=10, retrieve_cap=20)


@pytest.fixture
def small_cfg():
    return tr.TrainConfig(epochs=2, batch_size=64, emb_dim=4, fusion_dim=8, ranker_hidden=8, gate_hidden=4)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
