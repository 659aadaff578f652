from pathlib import Path

import pytest

from adacs.config import ConfigError, build_config, dump_config, load_config, parse_lines


def build(text):
    return build_config(parse_lines(text), base_dir="/base")


def test_defaults():
    cfg = build("")
    assert cfg.train.epochs == 300 and cfg.train.warmup == 50
    assert cfg.synth is not None and cfg.data_dir is None
    assert cfg.count == 100 and cfg.score_every == 25


def test_parsing_and_aliases():
    cfg = build("""
        # comment
        N = 20        # trailing comment
        N_w = 5
        lambda = 0.02
        method = nll
        size = 32
        synth_seed = 9
        radial = true
        methods = none, adacs
        eval_seeds = 1,2,3
        out = runs/x
    """)
    assert (cfg.train.epochs, cfg.train.warmup, cfg.train.lam, cfg.train.method) == (20, 5, 0.02, "nll")
    assert cfg.synth.size == 32 and cfg.synth.seed == 9 and cfg.synth.radial
    assert cfg.methods == ("none", "adacs") and cfg.eval_seeds == (1, 2, 3)
    assert cfg.out == Path("/base/runs/x")


@pytest.mark.parametrize("text, line", [
    ("epochs = 10\nbogus = 1\n", 2),
    ("epochs = ten\n", 1),
    ("\n\nno equals sign\n", 3),
    ("alpha = 1\nalpha = 2\n", 2),
    ("size = 32\nmethod = nope\n", 2),
    ("radial = maybe\n", 1),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=f"<config>:{line}:"):
        build_config(parse_lines(text))


def test_invalid_method_lists_valid_methods():
    with pytest.raises(ConfigError, match="valid methods: none, adacs, adareg, adaframe, nll, beta-nll"):
        build("method = bogus\n")
    with pytest.raises(ConfigError, match="valid methods"):
        build("methods = none, bogus\n")


def test_exactly_one_data_source():
    assert build("data_dir = d\n").data_dir == Path("/base/d")
    with pytest.raises(ConfigError, match="mutually exclusive"):
        build("data_dir = d\namplitude = 3\n")


def test_other_validation():
    with pytest.raises(ConfigError):
        build("epochs = 5\nwarmup = 9\n")
    with pytest.raises(ConfigError):
        build("amplitude = 40\n")
    with pytest.raises(ConfigError):
        build("methods = none,none\n")
    with pytest.raises(ConfigError):
        build("score_every = 0\n")


def test_dump_round_trip(tmp_path):
    cfg = build("epochs = 7\nwarmup = 2\nalpha = 0.3\nsize = 16\namplitude = 2\nnuisance_radius = 3\nnuisance_kind = constant-fill\nalpha_grid = 0,0.5\n")
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.train == cfg.train and again.synth == cfg.synth
    assert again.alpha_grid == cfg.alpha_grid and again.out == cfg.out.resolve()


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.txt")
