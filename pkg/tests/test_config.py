import numpy as np
import pytest

from opendet_lab.config import ConfigError, build_configs, dump_flat, load_config, parse_flat
from opendet_lab.losses import WeightingVariant
from opendet_lab.mining import MiningMethod

BASE = "total_iterations=100\nwarmup_iterations=10\nupl.beta=0.5\nic.gamma_0=0.1\n"


def test_missing_required_key_is_named():
    with pytest.raises(ConfigError, match="ic.gamma_0"):
        build_configs(parse_flat("total_iterations=100\nupl.beta=0.5\n"))


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="upl.gamma"):
        build_configs(parse_flat(BASE + "upl.gamma=3\n"))


def test_bad_value_is_named():
    with pytest.raises(ConfigError, match="upl.alpha"):
        build_configs(parse_flat(BASE + "upl.alpha=lots\n"))
    with pytest.raises(ConfigError, match="mining.method"):
        build_configs(parse_flat(BASE + "mining.method=psychic\n"))


def test_parse_errors():
    with pytest.raises(ConfigError, match=":2"):
        parse_flat("a=1\nnonsense\n")
    with pytest.raises(ConfigError, match="twice"):
        parse_flat("a=1\na=2\n")


def test_nested_values_and_comments():
    world, cfg = build_configs(parse_flat(
        BASE + "# comment\nupl.alpha=2.0  # inline\nupl.weighting_variant=identity\nmining.method=max_entropy\n"
        "world.feature_dim=3\nworld.fg_iou_range=0.6,0.9\nmask_unknown_without_upl=false\n"), seed=9)
    assert cfg.upl.alpha == 2.0 and cfg.upl.weighting_variant is WeightingVariant.IDENTITY
    assert cfg.mining.method is MiningMethod.MAX_ENTROPY
    assert world.feature_dim == 3 and world.fg_iou_range == (0.6, 0.9)
    assert cfg.seed == 9 and cfg.mask_unknown_without_upl is False


def test_cluster_means_from_rows():
    world, _ = build_configs(parse_flat(BASE + "world.num_known=2\nworld.num_unknown_clusters=1\n"
                                        "world.cluster_means=1,0;0,1;-1,-1\n"))
    assert np.array_equal(world.cluster_means, [[1, 0], [0, 1], [-1, -1]])


def test_invalid_trainer_values_reported():
    with pytest.raises(ConfigError, match="warmup"):
        build_configs(parse_flat("total_iterations=10\nwarmup_iterations=10\nupl.beta=0\nic.gamma_0=0\n"))


def test_dump_round_trip(tmp_path):
    world, cfg = build_configs(parse_flat(BASE + "upl.alpha=1.5\nworld.cluster_stddev=0.7\n"))
    p = tmp_path / "c.cfg"
    p.write_text(dump_flat(world, cfg))
    w2, c2 = load_config(p)
    assert dump_flat(w2, c2) == dump_flat(world, cfg)
    assert np.array_equal(w2.cluster_means, world.cluster_means)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.cfg")
