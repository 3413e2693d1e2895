import pytest

from popcnn.config import PipelineConfig, dump_config, load_config, parse_config_text
from popcnn.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == PipelineConfig()
    assert (cfg.cell_size, cfg.tile_h, cfg.tile_w, cfg.bands, cfg.chunk_size) == (0.01, 74, 74, 7, 1000)
    assert (cfg.train_frac, cfg.val_frac, cfg.batch_size, cfg.epochs) == (0.1, 0.01, 512, 30)


def test_batch_size_reaches_train_config(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# paper batch\nbatch_size=512\n")
    tc = load_config(p).train_config()
    assert tc.batch_size == 512 and tc.adam.lr == 0.001 and tc.adam.eps == 1e-8


def test_train_frac_zero_rejected(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("train_frac=0\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_unknown_key_and_bad_value_name_line():
    with pytest.raises(ConfigError, match=r"c:2: unknown config key 'batchsize'"):
        parse_config_text("epochs=3\nbatchsize=4\n", "c")
    with pytest.raises(ConfigError, match="c:1"):
        parse_config_text("epochs=three\n", "c")
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_config_text("epochs\n", "c")


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("epochs=3\nseed=1\n")
    cfg = load_config(p, {"epochs": "7", "seed": 9})
    assert cfg.epochs == 7 and cfg.seed == 9


def test_typed_values():
    vals = parse_config_text("batchnorm=yes\ncounty_grid=5, 10\ncity_peak_range=1,2.5\npreset=tiny\n")
    assert vals == {"batchnorm": True, "county_grid": (5, 10), "city_peak_range": (1.0, 2.5), "preset": "tiny"}


def test_dump_roundtrip():
    cfg = PipelineConfig(epochs=4, county_grid=(2, 5), rural_range=(1.5, 3.0))
    assert load_config(None, parse_config_text(dump_config(cfg))) == cfg


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/cfg.txt")


def test_world_spec_mirrors_config():
    cfg = PipelineConfig(rows=20, cols=30, tile_h=18, structures_per_class=3, rural_range=(1.0, 2.0))
    spec = cfg.world_spec()
    assert (spec.rows, spec.cols, spec.tile_h, spec.structures_per_class, spec.rural_range) == (20, 30, 18, 3, (1.0, 2.0))
