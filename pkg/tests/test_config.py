import json

import pytest

from ppctsim.config import LE13_FIXED_EPOCHS, SWEEP_PROTOCOL, RunConfig, config_from_dict, config_to_dict, load_config
from ppctsim.errors import ConfigurationError
from ppctsim.settings import EarlyStopping, FixedEpochs, SettingKind


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == RunConfig()
    assert cfg.protocol == SWEEP_PROTOCOL
    le13 = [s for s in cfg.settings if s.kind is SettingKind.ANDROID_PLUS_IOS_LE13][0]
    assert le13.stopping_override == FixedEpochs(LE13_FIXED_EPOCHS)
    assert cfg.arch.layer_widths == (cfg.gen.dim_x, 64, 32, 1)


def test_round_trip():
    cfg = config_from_dict(
        {
            "gen": {"n_users": 50, "xp_signal_strength": 2},
            "protocol": {"bits": 4, "grouping_policy": "Cohort"},
            "train": {"stopping": {"fixed_epochs": 7}, "optimizer": "adam"},
            "settings": ["NonPPCT", {"kind": "AndroidPlusIosLe13", "fixed_epochs": 3}],
            "rates": [0, 0.5],
            "hidden": [8],
            "n_seeds": 3,
        }
    )
    assert cfg.gen.xp_signal_strength == 2.0
    assert cfg.protocol.window_h == SWEEP_PROTOCOL.window_h  # partial block layered on the sweep default
    assert cfg.train.stopping == FixedEpochs(7)
    assert cfg.settings[1].stopping_override == FixedEpochs(3)
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg


@pytest.mark.parametrize(
    "data,field",
    [
        ({"gen": {"ios_fraction": 2.0}}, "gen.ios_fraction"),
        ({"gen": {"n_users": "many"}}, "gen.n_users"),
        ({"gen": {"nope": 1}}, "gen.nope"),
        ({"protocol": {"bits": 12}}, "protocol.bits"),
        ({"train": {"stopping": {"early_stopping": 0}}}, "train.stopping"),
        ({"train": {"stopping": "soon"}}, "train.stopping"),
        ({"settings": ["Everything"]}, "settings[0].kind"),
        ({"rates": [0.5, 0.2]}, "rates"),
        ({"rates": "all"}, "rates"),
        ({"use_mtl": "yes"}, "use_mtl"),
        ({"calibration_level": "global"}, "calibration_level"),
        ({"surprise": 1}, "surprise"),
    ],
)
def test_errors_name_field(data, field):
    with pytest.raises(ConfigurationError) as exc:
        config_from_dict(data)
    assert exc.value.field == field


def test_load_config_hash(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"n_seeds": 4}')
    cfg, h = load_config(p)
    assert cfg.n_seeds == 4 and len(h) == 64
    p.write_text('{"n_seeds": 4 ')
    with pytest.raises(ConfigurationError):
        load_config(p)
    assert load_config(None)[0] == RunConfig()


def test_early_stopping_parse():
    cfg = config_from_dict({"train": {"stopping": {"early_stopping": 3}}})
    assert cfg.train.stopping == EarlyStopping(3)
