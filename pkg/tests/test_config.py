import pytest

from sslpurify.config import DEFAULT_CONFIG, ConfigError, load_config, parse_config
from sslpurify.reversal import ReversalMode


def test_defaults():
    cfg = parse_config("")
    assert cfg.reversal_budget.epsilon == pytest.approx(8 / 255)
    assert cfg.reversal_budget.step_size == pytest.approx(2 / 255)
    assert cfg.reversal_budget.iterations == 20
    assert cfg.modes == [ReversalMode.NONE, ReversalMode.SINGLE_TASK_CONTRASTIVE, ReversalMode.MULTI_TASK]
    assert cfg.ssl.contrastive.temperature == 0.5 and cfg.ssl.rotation.num_rotations == 4
    assert not cfg.sign_steps and cfg.n == 1000


def test_fractions_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[reversal]\nepsilon = 4/255\nmodes = none\n")
    cfg = load_config(path, {"experiment.seed": "7"})
    assert cfg.reversal_budget.epsilon == 4 / 255
    assert cfg.modes == [ReversalMode.NONE] and cfg.seed == 7 and cfg.attack.seed == 7


@pytest.mark.parametrize("text, field", [
    ("[reversal]\nepsilon = -1", "reversal.epsilon"),
    ("[reversal]\nstep_size = 0", "reversal.step_size"),
    ("[reversal]\niterations = many", "reversal.iterations"),
    ("[reversal]\nmodes = mtl, magic", "reversal.modes"),
    ("[reversal]\ntask_weights = 1, 1", "reversal.task_weights"),
    ("[attack]\nkind = cw", "attack.kind"),
    ("[attack]\nunroll_steps = 50", "attack.unroll_steps"),
    ("[data]\nsource = cifar10", "data.dir"),
    ("[data]\ncolour = blue", "data.colour"),
    ("[bogus]\nx = 1", "bogus"),
    ("[ssl]\ncenter_fraction = 1.5", "ssl.center_fraction"),
    ("[eval]\ntraces = maybe", "eval.traces"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_config(text)


def test_default_text_parses_and_is_complete():
    assert parse_config(DEFAULT_CONFIG).source_text is not None


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/c.ini")
