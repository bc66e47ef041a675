"""Shared fixtures: a miniature pipeline configuration that runs in seconds."""

import pytest

from bitraj import config


def tiny_config_dict(**top_level) -> dict:
    raw = {
        "env": "chain-1d",
        "out_dir": "unused",
        "master_seed": 3,
        "dataset": {"episodes_a": 3, "episodes_b": 3},
        "diffusion": {
            "horizon": 8,
            "n_steps": 10,
            "hidden": [16, 16],
            "epochs": 8,
            "batch_size": 64,
            "k_embed_dim": 8,
        },
        "generation": {"n_anchors": 8, "anchor_region": "corridor"},
        "completion": {"hidden": [16, 16], "epochs": 10, "batch_size": 64},
        "learner": {"algorithms": ["bc"], "hidden": [16, 16], "steps": 50, "batch_size": 64},
        "evaluation": {"episodes": 4, "seeds": 1},
    }
    raw.update(top_level)
    return raw


@pytest.fixture(scope="module")
def tiny_cfg():
    return config.from_dict(tiny_config_dict())
