"""
experiment configuration

A config file is YAML with a schema version and one mapping per section::

    version: 1
    architecture: online
    seed: 0
    model:
      split: [1, 4, 1]
    decorrelation:
      lambda: 5.0

Missing keys take their defaults (see DEFAULTS), unknown keys are errors.
Values are resolved as defaults < config file < command line flags, then the
architecture preset forces what the architecture requires (e.g. sl runs
without any defense).
"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field

import yaml

from guarded_tuning.attack import AttackConfig
from guarded_tuning.codec import TensorCodec
from guarded_tuning.decorrelation import DecorrelationConfig
from guarded_tuning.errors import ConfigError
from guarded_tuning.model import ModelConfig
from guarded_tuning.protocol.endpoints import Architecture, EndpointFlags, OptimizerConfig
from guarded_tuning.tasks import TaskConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARCHITECTURES = tuple(a.value for a in Architecture)

DEFAULTS = {
    'version': SCHEMA_VERSION,
    'architecture': 'online',
    'seed': 0,
    'model': {
        'vocab_size': 256,
        'd_model': 64,
        'n_heads': 4,
        'n_layers_total': 6,
        'max_seq_len': 16,
        'split': [1, 4, 1],
        'emulator_size': 2,
        'init_std': 0.02,
    },
    'decorrelation': {
        'lambda': 5.0,
        'epsilon': 1e-8,
        'embedding_grad': True,
    },
    'quantization': {
        'enabled': True,
        'bits': 8,
        'percentile': 99,
    },
    'optimizer': {
        'lr': 1e-3,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
    },
    'training': {
        'steps': 500,
        'epochs': 1,
        'batch_size': 16,
        'server_finetunes_backbone': True,
    },
    'task': {
        'name': 'keyed-lookup',
        'n_train': 2000,
        'n_eval': 200,
    },
    'attack': {
        'stages': ['inverter', 'activation_match', 'gradient_match'],
        'steps': 20,
        'lr': 2.0,
        'seeds': [0],
        'cadence': 100,
        'inverter_steps': 400,
        'inverter_hidden': 256,
        'aux_size': 1024,
        'n_batches': 5,
        'top_k': 4,
    },
    'output': {
        'directory': 'runs/default',
    },
}

# values an architecture forces, whatever the file or the flags say
PRESETS = {
    'sl': {'decorrelation.lambda': 0.0, 'quantization.enabled': False},
    'online': {},
    'gradfree': {'decorrelation.lambda': 0.0},
    'offline': {},
    'offsite': {'decorrelation.lambda': 0.0},
}


@dataclass(frozen=True)
class QuantizationConfig:
    enabled: bool = True
    bits: int = 8
    percentile: int = 99

    def validate(self):
        errors = []
        if not 1 <= self.bits <= 16:
            errors.append(f'quantization.bits: must be in [1, 16], got {self.bits}')
        if not 1 <= self.percentile <= 100:
            errors.append(f'quantization.percentile: must be in [1, 100], got {self.percentile}')
        if errors:
            raise ConfigError(errors)
        return self

    def codec(self):
        return TensorCodec(enabled=self.enabled, bits=self.bits, percentile=self.percentile)


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 500
    epochs: int = 1
    batch_size: int = 16
    server_finetunes_backbone: bool = True

    def validate(self):
        errors = []
        if self.steps < 0:
            errors.append('training.steps: must be >= 0 (0 means epochs over the training set)')
        if self.epochs < 1:
            errors.append('training.epochs: must be >= 1')
        if self.batch_size < 1:
            errors.append('training.batch_size: must be >= 1')
        if errors:
            raise ConfigError(errors)
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = 'online'
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    emulator_size: int = 2
    decorrelation: DecorrelationConfig = field(default_factory=DecorrelationConfig)
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    output_directory: str = 'runs/default'

    def validate(self):
        """ check every section, reporting all violations at once """
        errors = []
        if self.architecture not in ARCHITECTURES:
            errors.append(f'architecture: unknown {self.architecture!r}, expected one of {", ".join(ARCHITECTURES)}')
        for section in (self.model, self.decorrelation, self.quantization, self.training, self.task, self.attack):
            try:
                section.validate()
            except ConfigError as e:
                errors.extend(e.messages)
        if self.optimizer.lr <= 0:
            errors.append('optimizer.lr: must be > 0')
        if not 0 <= self.optimizer.beta1 < 1 or not 0 <= self.optimizer.beta2 < 1:
            errors.append('optimizer.beta1/beta2: must be in [0, 1)')
        if self.architecture in ('offline', 'offsite') and len(self.model.split) == 3:
            n_backbone = self.model.split[1]
            if not 2 <= self.emulator_size <= n_backbone:
                errors.append(f'model.emulator_size: must be in [2, {n_backbone}], got {self.emulator_size}')
        if self.training.batch_size > self.task.n_train:
            errors.append(f'training.batch_size: {self.training.batch_size} exceeds task.n_train={self.task.n_train}')
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def arch(self):
        return Architecture(self.architecture)

    def flags(self):
        return EndpointFlags(server_finetunes_backbone=self.training.server_finetunes_backbone,
                             quantize_enabled=self.quantization.enabled,
                             decorrelation=self.decorrelation)

    def to_dict(self):
        """ the resolved config in file layout """
        model = self.model.to_dict()
        model['emulator_size'] = self.emulator_size
        return {
            'version': SCHEMA_VERSION,
            'architecture': self.architecture,
            'seed': self.seed,
            'model': model,
            'decorrelation': {'lambda': self.decorrelation.lam, 'epsilon': self.decorrelation.epsilon,
                              'embedding_grad': self.decorrelation.embedding_grad},
            'quantization': {'enabled': self.quantization.enabled, 'bits': self.quantization.bits,
                             'percentile': self.quantization.percentile},
            'optimizer': {'lr': self.optimizer.lr, 'beta1': self.optimizer.beta1,
                          'beta2': self.optimizer.beta2, 'eps': self.optimizer.eps},
            'training': {'steps': self.training.steps, 'epochs': self.training.epochs,
                         'batch_size': self.training.batch_size,
                         'server_finetunes_backbone': self.training.server_finetunes_backbone},
            'task': {'name': self.task.name, 'n_train': self.task.n_train, 'n_eval': self.task.n_eval},
            'attack': {'stages': list(self.attack.stages), 'steps': self.attack.steps, 'lr': self.attack.lr,
                       'seeds': list(self.attack.seeds), 'cadence': self.attack.cadence,
                       'inverter_steps': self.attack.inverter_steps,
                       'inverter_hidden': self.attack.inverter_hidden, 'aux_size': self.attack.aux_size,
                       'n_batches': self.attack.n_batches, 'top_k': self.attack.top_k},
            'output': {'directory': self.output_directory},
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def config_hash(self):
        """ SHA-256 of the canonical JSON of everything but the output location """
        values = self.to_dict()
        values.pop('output')
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode('utf8')).hexdigest()


def _check_type(path, value, default, errors):
    # the type of every leaf follows its default
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
        if ok and default:
            item_type = type(default[0])
            ok = all(isinstance(v, item_type) and not isinstance(v, bool) for v in value)
        value = list(value) if ok else value
    else:
        ok = True
    if not ok:
        errors.append(f'{path}: expected {type(default).__name__}, got {value!r}')
    return value


def merge(base, override, errors, prefix=''):
    """ deep-merge override into a copy of base, collecting unknown and mistyped keys """
    merged = copy.deepcopy(base)
    if not isinstance(override, dict):
        errors.append(f'{prefix or "config"}: expected a mapping, got {type(override).__name__}')
        return merged
    for key, value in override.items():
        path = f'{prefix}{key}'
        if key not in base:
            errors.append(f'{path}: unknown key')
        elif isinstance(base[key], dict):
            merged[key] = merge(base[key], value, errors, prefix=f'{path}.')
        else:
            merged[key] = _check_type(path, value, base[key], errors)
    return merged


def set_dotted(values, dotted, value):
    section = values
    *parents, leaf = dotted.split('.')
    for name in parents:
        section = section[name]
    section[leaf] = value


def _build(values):
    model = dict(values['model'])
    emulator_size = model.pop('emulator_size')
    model['split'] = tuple(model['split'])
    decorrelation = values['decorrelation']
    return ExperimentConfig(
        architecture=values['architecture'],
        seed=values['seed'],
        model=ModelConfig(**model),
        emulator_size=emulator_size,
        decorrelation=DecorrelationConfig(lam=decorrelation['lambda'], epsilon=decorrelation['epsilon'],
                                          embedding_grad=decorrelation['embedding_grad']),
        quantization=QuantizationConfig(**values['quantization']),
        optimizer=OptimizerConfig(**values['optimizer']),
        training=TrainingConfig(**values['training']),
        task=TaskConfig(**values['task']),
        attack=AttackConfig(**values['attack']),
        output_directory=values['output']['directory'],
    )


def resolve(raw=None, overrides=None):
    """ build a validated ExperimentConfig from a parsed file and flag overrides

    Args:
        raw (dict): the parsed config file, or None for the defaults
        overrides (dict): dotted key => value, e.g. {'decorrelation.lambda': 0.0}

    Returns:
        ExperimentConfig
    """
    errors = []
    raw = {} if raw is None else raw
    if isinstance(raw, dict) and raw.get('version', SCHEMA_VERSION) != SCHEMA_VERSION:
        errors.append(f'version: unsupported schema version {raw.get("version")!r}, expected {SCHEMA_VERSION}')
    values = merge(DEFAULTS, raw, errors)
    nested = {}
    for dotted, value in (overrides or {}).items():
        if value is not None:
            section = nested
            *parents, leaf = dotted.split('.')
            for name in parents:
                section = section.setdefault(name, {})
            section[leaf] = value
    values = merge(values, nested, errors)
    if errors:
        raise ConfigError(errors)
    preset = PRESETS.get(values['architecture'], {})
    for dotted, forced in preset.items():
        section, leaf = dotted.split('.')
        if values[section][leaf] != forced:
            logger.info('%s preset sets %s to %s', values['architecture'], dotted, forced)
        set_dotted(values, dotted, forced)
    return _build(values).validate()


def load_config(path=None, overrides=None):
    """ read a YAML config file (or the defaults) and resolve it """
    raw = None
    if path is not None:
        with open(path) as fin:
            raw = yaml.safe_load(fin)
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f'{path}: expected a mapping at the top level')
    return resolve(raw, overrides)
