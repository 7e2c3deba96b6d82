import json

import pytest

from viewhall import config as C


def test_strip_comments_keeps_strings_and_lines():
    text = '{\n  "out": "a//b#c", // trailing\n  # whole line\n  /* block\n  */ "seed": 3\n}'
    cleaned = C.strip_comments(text)
    assert cleaned.count("\n") == text.count("\n")
    assert json.loads(cleaned) == {"out": "a//b#c", "seed": 3}


def test_escaped_quote_in_string():
    assert json.loads(C.strip_comments(r'{"out": "x\"//y"}')) == {"out": 'x"//y'}


def test_unterminated_block_comment():
    with pytest.raises(C.ConfigError, match="line 2"):
        C.strip_comments('{\n/* oops\n}')


def test_parse_error_carries_line_and_column():
    with pytest.raises(C.ConfigError, match=r"cfg.json:3:\d+:.*\n\s+\"seed\": ,"):
        C.parse_config_text('{\n  // comment\n  "seed": ,\n}', "cfg.json")


def test_top_level_must_be_object():
    with pytest.raises(C.ConfigError, match="object"):
        C.parse_config_text("[1, 2]")


def test_defaults():
    cfg = C.build_config({})
    assert cfg.profile == "desk" and cfg.seed == 7
    assert cfg.dataset.pitches == C.ALL_PITCHES and len(cfg.dataset.pitches) == 9
    assert (cfg.dataset.height, cfg.dataset.width) == (32, 48)
    paper = C.build_config({}, "paper")
    assert (paper.dataset.height, paper.dataset.width, paper.vtn.layers) == (384, 512, 8)
    assert paper.temperature == 1.0


def test_file_values_merge_into_profile():
    cfg = C.build_config({"seed": 9, "vtn": {"epochs": 3}, "seg": {"adapt_lr": 1e-4},
                          "dataset": {"pitches": [10, 20]}, "vtn_mode": "single", "adapt_pitches": [10]})
    assert cfg.seed == 9 and cfg.vtn.epochs == 3 and cfg.vtn.layers == 2
    assert cfg.seg.adapt_lr == 1e-4 and cfg.dataset.pitches == [10.0, 20.0]
    assert cfg.vtn_mode == "single" and cfg.adapt_pitches == [10.0]


@pytest.mark.parametrize("data, match", [
    ({"sead": 1}, "unknown keys"),
    ({"dataset": {"n_frames": 2}}, "unknown dataset keys"),
    ({"vtn": {"heads": 2}}, "unknown VTN"),
    ({"dataset": {"height": 64}}, "differs"),
    ({"dataset": {"pitches": [0]}}, "pitches"),
    ({"temperature": -1}, "temperature"),
    ({"seed": -2}, "seed"),
    ({"vtn_mode": "both"}, "vtn_mode"),
    ({"adapt_pitches": [45]}, "adapt_pitches"),
])
def test_invalid_configs(data, match):
    with pytest.raises(C.ConfigError, match=match):
        C.build_config(data, source="x.json")


def test_unknown_profile():
    with pytest.raises(C.ConfigError, match="profile"):
        C.build_config({}, "huge")


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('// run\n{"seed": 4, "profile": "desk"}\n')
    assert C.load_config(p).seed == 4
    with pytest.raises(C.ConfigError, match="cannot read"):
        C.load_config(tmp_path / "missing.json")


def test_to_dict_round_trips_through_build():
    cfg = C.build_config({"seed": 5, "vtn": {"epochs": 2}, "adapt_pitches": [10, 30]})
    d = cfg.to_dict()
    json.dumps(d)
    assert C.build_config(d).to_dict() == d
