from dataclasses import replace

import pytest

from mmksum.config import load_config
from mmksum.data import generate_synthetic
from mmksum.training import train_loop


@pytest.fixture(scope="session")
def tiny_trained():
    """A briefly trained nano model on 8 synthetic dialogues (shared)."""
    exp = load_config("test-nano")
    dialogues, kb = generate_synthetic(8, seed=5)
    cfg = replace(exp.train, max_steps=60, eval_interval=30)
    result = train_loop(dialogues, kb, exp.model, cfg, ("sum", "mcs", "di"))
    return exp, dialogues, kb, result
