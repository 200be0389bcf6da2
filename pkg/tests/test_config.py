from __future__ import annotations

import pytest

from skillmas.config import EngineConfig, config_from_mapping


def test_defaults_match_documented_thresholds():
    config = EngineConfig()
    assert config.episodes_per_round == 40
    assert config.top_k == 3
    assert config.repeat_multiplicity == 2
    assert config.near_miss_progress == 0.5
    assert config.dedup_similarity == 0.8
    assert config.cluster_threshold == 0.5
    assert (config.promote_min_uses, config.promote_min_ratio) == (3, 0.6)
    assert (config.pool_prune_min_uses, config.pool_prune_max_ratio) == (5, 0.3)
    assert (config.prune_min_count, config.prune_max_utility) == (5, 0.3)
    assert (config.mass_threshold, config.gap_threshold) == (3, 0.2)
    assert (config.overlap_threshold, config.min_count) == (0.5, 5)


def test_kebab_and_snake_keys_accepted():
    config = config_from_mapping({"top-k": "5", "mass_threshold": 4})
    assert config.top_k == 5
    assert config.mass_threshold == 4


def test_bool_coercion_from_text():
    assert config_from_mapping({"cross-round-repeats": "true"}).cross_round_repeats
    assert not config_from_mapping({"cross-round-repeats": "false"}).cross_round_repeats
    with pytest.raises(ValueError):
        config_from_mapping({"cross-round-repeats": "maybe"})


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown threshold"):
        config_from_mapping({"wibble": 1})


def test_overrides_layer_over_base():
    base = config_from_mapping({"top-k": 7})
    layered = config_from_mapping({"mass-threshold": 9}, base=base)
    assert layered.top_k == 7
    assert layered.mass_threshold == 9
