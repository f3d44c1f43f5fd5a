import pytest

from rab2def.config import ExperimentConfig, dump_config, parse_config, with_overrides
from rab2def.errors import ConfigError


def test_parse_types_and_comments():
    cfg = parse_config("""
    # a comment
    rounds = 5
    lr = 0.25   # trailing comment
    boost_byzantine = yes
    n_byz = auto
    n_select = 3
    defense = rab2def
    """)
    assert cfg.rounds == 5 and cfg.lr == 0.25 and cfg.boost_byzantine is True
    assert cfg.n_byz is None and cfg.n_select == 3 and cfg.defense == "rab2def"


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "rounds = 1\nrounds = 2",
    "rounds five",
    "rounds = five",
    "boost_byzantine = maybe",
    "defense = magic",
    "n_clients = 5\nclients_per_round = 6",
    "attack = backdoor\nn_adversarial = 60",
    "hidden = 4,x",
])
def test_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_roundtrip():
    cfg = ExperimentConfig(rounds=3, n_byz=2, boost_byzantine=True, hidden="8,4")
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(ExperimentConfig())) == ExperimentConfig()


def test_overrides_validate():
    cfg = with_overrides(ExperimentConfig(), rounds=2)
    assert cfg.rounds == 2
    with pytest.raises(ConfigError):
        with_overrides(cfg, lr=-1.0)
    assert ExperimentConfig(hidden="").hidden_sizes == ()
