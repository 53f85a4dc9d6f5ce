import json

import numpy as np
import pytest

from switchfit.config import load_fit_config, parse_fit_config
from switchfit.errors import ConfigError
from switchfit.families import FamilyTag
from switchfit.likelihood import Regularizer, SwitchStructure


BASE = {"structure": "full", "family": "gaussian", "modes": 3}


def test_minimal_config_uses_defaults():
    cfg = parse_fit_config(BASE)
    assert cfg.skeleton.structure is SwitchStructure.FULL
    assert cfg.skeleton.family.tag is FamilyTag.GAUSSIAN
    assert cfg.skeleton.d == 3
    assert (cfg.skeleton.cfg.t_y, cfg.skeleton.cfg.t_u, cfg.skeleton.cfg.include_bias) == (1, 0, True)
    assert cfg.regularizers == (Regularizer(),)
    assert cfg.options.n_restarts == 5
    assert cfg.split is None
    assert cfg.fixed_precision is None


def test_full_config():
    cfg = parse_fit_config(
        {
            **BASE,
            "structure": "only-state",
            "family": {"name": "student_t", "nu": 3},
            "lags": {"t_y": 2, "t_u": 2, "bias": False},
            "regularizer": [{"gamma1": 0.1}, {"gamma1": 1.0, "gamma3": 0.5}],
            "restarts": 7,
            "workers": 2,
            "seed": 13,
            "max_iters": 40,
            "split": {"train": [0, 100], "validation": [100, 150]},
            "solver": {"max_newton_iters": 30},
            "fixed_precision": [[2.0]],
        }
    )
    assert cfg.skeleton.structure is SwitchStructure.STATE_DEPENDENT
    assert cfg.skeleton.family.nu == 3.0
    assert cfg.skeleton.cfg.t_u == 2
    assert cfg.regularizers == (Regularizer(gamma1=0.1), Regularizer(gamma1=1.0, gamma3=0.5))
    assert (cfg.options.n_restarts, cfg.options.n_workers, cfg.options.seed) == (7, 2, 13)
    assert cfg.options.solver.max_newton_iters == 30
    assert cfg.options.fixed_covariance
    assert np.array_equal(cfg.fixed_precision, [[2.0]])
    assert cfg.split.validation == (100, 150)


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"colour": "red"}, "colour"),
        ({"modes": 0}, "modes"),
        ({"structure": "sticky"}, "structure"),
        ({"family": "cauchy"}, "family.name"),
        ({"family": {"name": "student_t"}}, "family"),
        ({"family": {"name": "gaussian", "shape": 1}}, "family.shape"),
        ({"lags": {"t_y": -1}}, "lags.t_y"),
        ({"lags": {"bias": "yes"}}, "lags.bias"),
        ({"regularizer": {"gamma2": -1.0}}, "regularizer.gamma2"),
        ({"regularizer": [{"gamma1": 1.0}, {"gamma4": 1.0}]}, "regularizer[1].gamma4"),
        ({"regularizer": []}, "regularizer"),
        ({"restarts": 0}, "restarts"),
        ({"workers": "many"}, "workers"),
        ({"grad_stop": 0.0}, "grad_stop"),
        ({"split": {"validation": [0, 10]}}, "split.train"),
        ({"split": {"train": [0, 10.5]}}, "split.train"),
        ({"solver": {"backtrack": 2.0}}, "solver.backtrack"),
        ({"solver": {"speed": 1}}, "solver.speed"),
        ({"fixed_precision": [[1.0, 2.0]]}, "fixed_precision"),
        ({"fixed_covariance": 1}, "fixed_covariance"),
        ({"family": "laplace", "fixed_covariance": True}, "fixed_covariance"),
    ],
)
def test_invalid_configs_name_the_field(patch, field):
    with pytest.raises(ConfigError) as info:
        parse_fit_config({**BASE, **patch})
    assert info.value.field == field
    assert f"Invalid field '{field}'" in str(info.value)


def test_required_keys():
    for key in ("structure", "family", "modes"):
        payload = {k: v for k, v in BASE.items() if k != key}
        with pytest.raises(ConfigError, match=f"Invalid field '{key}': is required"):
            parse_fit_config(payload)
    with pytest.raises(ConfigError, match="must be a JSON object"):
        parse_fit_config([1, 2])


def test_load_fit_config(tmp_path):
    path = tmp_path / "fit.json"
    path.write_text(json.dumps(BASE), encoding="utf-8")
    assert load_fit_config(path).skeleton.d == 3

    path.write_text("{\n  \"modes\": 3,\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="Invalid field 'config'(.|\n)*not valid JSON"):
        load_fit_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_fit_config(tmp_path / "absent.json")
