import pytest

from config import (ExperimentConfig, apply_overrides, config_hash, dump_config, load_config, parse_config_text,
                    parse_set_args, save_config)
from errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.layer_sizes == [64, 256, 64]
    assert cfg.kprime == 24


def test_file_then_overrides_then_environment(tmp_path):
    path = tmp_path / 'exp.txt'
    path.write_text("# small run\nsynthetic_classes = 40\nsoftmax_mode = knn  # sampled\nepochs = 3\n")
    cfg = load_config(str(path), {'epochs': '5'}, environ={'XKNN_OUTPUT_DIR': str(tmp_path / 'out')})
    assert cfg.synthetic_classes == 40
    assert cfg.softmax_mode == 'knn'
    assert cfg.epochs == 5
    assert cfg.output_dir == str(tmp_path / 'out')


def test_values_are_coerced_by_field_type():
    cfg = apply_overrides(ExperimentConfig(), {'lars': 'yes', 'spread': '0.5', 'hidden-layers': '2',
                                               'dataset_path': 'none'})
    assert cfg.lars is True
    assert cfg.spread == 0.5
    assert cfg.hidden_layers == 2
    assert cfg.dataset_path is None


@pytest.mark.parametrize('overrides', [
    {'epochz': '3'},
    {'epochs': 'three'},
    {'lars': 'maybe'},
])
def test_bad_overrides(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), overrides)


@pytest.mark.parametrize('overrides', [
    {'softmax_mode': 'sampled'},
    {'active_fraction': 0.0},
    {'sparsity_ratio': 1.0},
    {'lr_policy': 'adam', 'sparsity_ratio': 0.9},
    {'t_ini': 9.0, 't_final': 8.0},
    {'num_workers': 0},
    {'softmax_mode': 'knn', 'knn_k': 1000},
    {'softmax_mode': 'knn', 'knn_k': 5, 'knn_kprime': 3},
    {'sim_mode': 'forked'},
])
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), overrides).validate()


def test_malformed_config_line():
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3\n", 'exp.txt')


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'missing.txt'), environ={})


def test_set_args():
    assert parse_set_args(['lr_policy=adam', 'eta0 = 0.2']) == {'lr_policy': 'adam', 'eta0': '0.2'}
    with pytest.raises(ConfigError):
        parse_set_args(['lr_policy'])


def test_dump_round_trip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), {'epochs': 4, 'softmax_mode': 'knn', 'lars': True})
    path = tmp_path / 'config.txt'
    save_config(cfg, str(path))
    assert load_config(str(path), environ={}) == cfg
    assert 'dataset_path = none' in dump_config(cfg)


def test_config_hash_tracks_model_shape_only():
    base = ExperimentConfig()
    assert config_hash(base, 100) == config_hash(apply_overrides(ExperimentConfig(), {'epochs': 99}), 100)
    assert config_hash(base, 100) != config_hash(base, 101)
    assert config_hash(base, 100) != config_hash(apply_overrides(ExperimentConfig(), {'hidden_dim': 8}), 100)
    assert len(config_hash(base, 100)) == 64
