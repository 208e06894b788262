"""
Experiment configuration: one dataclass, flat ``key = value`` files and
command-line overrides.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

from errors import ConfigError
from fccs import POLICIES, UNITS

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = 'XKNN_OUTPUT_DIR'

# fields that change the shape of a checkpoint
MODEL_FIELDS = ('feature_dim', 'hidden_dim', 'hidden_layers', 'embedding_dim')


@dataclass
class ExperimentConfig:
    # dataset
    dataset_path: Optional[str] = None
    synthetic_classes: int = 1000
    samples_per_class: int = 50
    test_samples_per_class: int = 10
    feature_dim: int = 64
    spread: float = 0.3

    # model and softmax
    hidden_dim: int = 256
    hidden_layers: int = 1
    embedding_dim: int = 64
    softmax_mode: str = 'full'
    scale: float = 30.0
    knn_k: int = 12
    active_fraction: float = 0.1
    knn_kprime: int = 0
    graph_rebuild_epochs: int = 1
    graph_cache: Optional[str] = None

    # gradient sparsification (0 keeps dense gradients)
    sparsity_ratio: float = 0.0
    sparsity_warmup_epochs: int = 0
    topk_chunk_size: int = 4096

    # optimizer and schedule
    lr_policy: str = 'fccs'
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta0: float = 0.1
    t_warm: float = 1.0
    b0: int = 32
    t_ini: float = 1.0
    t_final: float = 8.0
    batch_growth: int = 64
    increasing_variant: bool = True
    schedule_unit: str = 'epoch'
    epochs: int = 10
    adam_lr: float = 1e-3
    piecewise_step_epochs: int = 5
    piecewise_factor: float = 0.1
    lars: bool = False
    lars_trust: float = 0.001
    lars_epsilon: float = 1e-9
    max_micro_batch: int = 512

    # topology
    num_workers: int = 1
    micro_batches: int = 1
    sim_mode: str = 'sequential'

    # seeds and output
    seed: int = 0
    selection_seed: int = 1
    output_dir: str = 'runs/default'

    @property
    def layer_sizes(self):
        return [self.feature_dim] + [self.hidden_dim] * self.hidden_layers + [self.embedding_dim]

    @property
    def kprime(self):
        return self.knn_kprime or 2 * self.knn_k

    def validate(self):
        counts = ('synthetic_classes', 'samples_per_class', 'test_samples_per_class', 'feature_dim',
                  'hidden_dim', 'embedding_dim', 'knn_k', 'graph_rebuild_epochs', 'topk_chunk_size',
                  'b0', 'batch_growth', 'epochs', 'num_workers', 'micro_batches', 'max_micro_batch',
                  'piecewise_step_epochs')
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive count, got {getattr(self, name)}")
        if self.hidden_layers < 0:
            raise ConfigError("hidden_layers cannot be negative")
        if self.spread < 0:
            raise ConfigError(f"spread must be non-negative, got {self.spread}")
        if self.softmax_mode not in ('full', 'knn'):
            raise ConfigError(f"softmax_mode must be 'full' or 'knn', got {self.softmax_mode!r}")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ConfigError(f"active_fraction must be in (0, 1], got {self.active_fraction}")
        if self.softmax_mode == 'knn':
            if self.knn_k >= self.synthetic_classes and self.dataset_path is None:
                raise ConfigError(f"knn_k={self.knn_k} needs more than {self.synthetic_classes} classes")
            if self.knn_kprime and self.knn_kprime < self.knn_k:
                raise ConfigError(f"knn_kprime={self.knn_kprime} must be at least knn_k={self.knn_k}")
        if not 0.0 <= self.sparsity_ratio < 1.0:
            raise ConfigError(f"sparsity_ratio must be in [0, 1), got {self.sparsity_ratio}")
        if self.lr_policy not in POLICIES:
            raise ConfigError(f"lr_policy must be one of {POLICIES}, got {self.lr_policy!r}")
        if self.lr_policy == 'adam' and self.sparsity_ratio > 0:
            raise ConfigError("gradient sparsification needs a momentum-SGD policy, not adam")
        if self.schedule_unit not in UNITS:
            raise ConfigError(f"schedule_unit must be one of {UNITS}, got {self.schedule_unit!r}")
        if self.t_ini > self.t_final:
            raise ConfigError(f"t_ini={self.t_ini} must not exceed t_final={self.t_final}")
        if self.eta0 <= 0 or self.adam_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.sim_mode not in ('sequential', 'threaded'):
            raise ConfigError(f"sim_mode must be 'sequential' or 'threaded', got {self.sim_mode!r}")
        if self.num_workers > self.synthetic_classes and self.dataset_path is None:
            raise ConfigError("every worker needs at least one class for its fc shard")
        return self


def _coerce(name, kind, raw):
    text = str(raw).strip()
    if kind in (bool, 'bool'):
        lowered = text.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if kind in (int, 'int'):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {text!r}") from None
    if kind in (float, 'float'):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {text!r}") from None
    if text.lower() in ('', 'none'):
        return None
    return text


def field_types():
    types = {}
    for f in fields(ExperimentConfig):
        kind = f.type
        if kind in ('Optional[str]', Optional[str]):
            kind = str
        types[f.name] = kind
    return types


def apply_overrides(cfg, overrides):
    """Apply ``{key: raw value}`` pairs (strings are parsed by field type)."""
    types = field_types()
    for key, raw in overrides.items():
        name = key.replace('-', '_')
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw if not isinstance(raw, str) else _coerce(name, types[name], raw)
        setattr(cfg, name, value)
    return cfg


def parse_config_text(text, source='<config>'):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        values[key] = value
    return values


def load_config(path=None, overrides=None, environ=None):
    """
    Defaults, then the config file, then explicit overrides, then the
    output-directory environment variable. The result is validated.
    """
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        apply_overrides(cfg, parse_config_text(text, path))
        logger.info("loaded config from %s", path)
    if overrides:
        apply_overrides(cfg, overrides)
    environ = os.environ if environ is None else environ
    if environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = environ[OUTPUT_DIR_ENV]
    return cfg.validate()


def parse_set_args(pairs):
    """``['lr_policy=adam', ...]`` from repeated ``--set`` flags."""
    out = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split('=', 1)
        out[key.strip()] = value.strip()
    return out


def dump_config(cfg):
    return ''.join(f"{k} = {'none' if v is None else v}\n" for k, v in asdict(cfg).items())


def save_config(cfg, filename):
    with open(filename, 'w') as f:
        f.write(dump_config(cfg))


def config_hash(cfg, num_classes):
    """sha256 over the class count and the fields that shape a checkpoint."""
    payload = ';'.join([f"num_classes={int(num_classes)}"] + [f"{name}={getattr(cfg, name)}" for name in MODEL_FIELDS])
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
