import os

import pytest

from config import PRESETS, RunConfig, load_config, parse_set_args, read_toml
from errors import ConfigError

DEFAULT_TOML = os.path.join(os.path.dirname(__file__), '..', 'configs', 'default.toml')


def _toml(tmp_path, text):
    path = tmp_path / 'run.toml'
    path.write_text(text)
    return str(path)


class TestLayering:
    def test_defaults(self):
        config = load_config(environ={})
        assert config == RunConfig()
        assert config.tau1 == 0.95 and config.ot_epsilon == 0.05

    def test_shipped_file_matches_defaults(self):
        config = load_config(DEFAULT_TOML, environ={})
        assert config.config_hash() == RunConfig().config_hash()

    def test_later_layers_win(self, tmp_path):
        path = _toml(tmp_path, "[pseudo_labels]\ntau2 = 0.3\nalpha = 0.8\n[optimizer]\nsteps = 10\n")
        config = load_config(path, ['tau2=0.2'], {'steps': 3},
                             environ={'PROTOSHIFT_TAU2': '0.25', 'PROTOSHIFT_ALPHA': '0.7'})
        assert config.tau2 == 0.2
        assert config.alpha == 0.7
        assert config.steps == 3

    def test_preset_then_file(self, tmp_path):
        config = load_config(_toml(tmp_path, 'preset = "visda"\n'), environ={})
        assert (config.tau2, config.lambda_batch) == (0.4, 0.1)
        config = load_config(_toml(tmp_path, 'preset = "office_home"\ntau2 = 0.2\n'), environ={})
        assert (config.tau2, config.lambda_batch) == (0.2, PRESETS['office_home']['lambda_batch'])

    def test_preset_from_set(self):
        config = load_config(set_args=['preset=domainnet'], environ={})
        assert config.preset == 'domainnet' and config.tau2 == 0.3

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match='unknown preset'):
            load_config(set_args=['preset=imagenet'], environ={})


class TestCoercion:
    def test_strings_are_coerced(self):
        config = load_config(set_args=['use_intra=off', 'hidden_dims=32,16', 'csv_path=none', 'seed=4'],
                             environ={'PROTOSHIFT_LR': '0.01'})
        assert config.use_intra is False
        assert config.hidden_dims == (32, 16)
        assert config.csv_path is None
        assert config.seed == 4 and config.lr == 0.01

    def test_toml_lists(self, tmp_path):
        config = load_config(_toml(tmp_path, "[model]\nhidden_dims = [8, 8]\n"), environ={})
        assert config.hidden_dims == (8, 8)

    @pytest.mark.parametrize('pair', ['steps=ten', 'use_batch=maybe', 'steps=2.5', 'lr=abc'])
    def test_bad_values(self, pair):
        with pytest.raises(ConfigError, match='cannot read'):
            load_config(set_args=[pair], environ={})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match='unknown config keys'):
            load_config(set_args=['temperature=1'], environ={})

    def test_malformed_set(self):
        with pytest.raises(ConfigError):
            parse_set_args(['tau2'])

    def test_malformed_toml(self, tmp_path):
        with pytest.raises(ConfigError):
            read_toml(_toml(tmp_path, "tau2 = \n"))


class TestValidation:
    @pytest.mark.parametrize('pair', [
        'ot_unbalanced=true', 'alpha=1.0', 'tau2=0.99', 'ot_epsilon=0', 't1=0', 'lambda_batch=-1',
        'inter_norm_axis=rows', 'strong_noise_sigma=0.01', 'shots=200', 'momentum=1.0',
    ])
    def test_rejected(self, pair):
        with pytest.raises(ConfigError):
            load_config(set_args=[pair], environ={})

    def test_equal_thresholds_accepted(self):
        assert load_config(set_args=['tau2=0.95'], environ={}).tau2 == 0.95


class TestConfigHash:
    def test_output_fields_do_not_change_hash(self):
        base = RunConfig()
        assert base.with_overrides(out='elsewhere', workers=3).config_hash() == base.config_hash()

    def test_computation_fields_change_hash(self):
        base = RunConfig()
        assert base.with_overrides(tau2=0.3).config_hash() != base.config_hash()
        assert base.with_overrides(seed=1).config_hash() != base.config_hash()

    def test_sub_configs(self):
        config = RunConfig(tau2=0.3, t1=0.1, lambda_batch=0.1)
        assert config.pseudo_label_config().tau2 == 0.3
        assert config.similarity_config().temperature_t1 == 0.1
        assert config.loss_weights().lambda_batch == 0.1
        assert config.scenario().seed == config.seed
