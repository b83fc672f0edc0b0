import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional

from dotenv import load_dotenv

from iss_rnn.corpus import DEFAULT_CORPUS_URL
from iss_rnn.errors import ConfigError, ParameterError
from iss_rnn.training import DEFAULT_TAU, RegConfig, TrainConfig
from iss_rnn.utils import config_fingerprint

logger = logging.getLogger(__name__)

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


def load_settings(load_env_file: bool = True) -> Dict[str, Any]:
    """
    Load runtime settings from environment variables.

    Args:
        load_env_file (bool): Whether to load variables from .env file. Defaults to True.

    Returns:
        Dict[str, Any]: THREADS, LOG_LEVEL, DATA_DIR and CORPUS_URL.

    Raises:
        ValueError: If a variable is set to an invalid value.
    """
    # Load environment variables from .env file if requested
    if load_env_file:
        load_dotenv()

    threads = os.getenv('ISS_RNN_THREADS', '1')
    try:
        threads_value = int(threads)
    except ValueError:
        raise ValueError(f"Invalid value for environment variable ISS_RNN_THREADS: {threads}")
    if threads_value < 1:
        raise ValueError(f"Invalid value for environment variable ISS_RNN_THREADS: {threads}")

    log_level = os.getenv('ISS_RNN_LOG_LEVEL', 'INFO').upper()
    if log_level not in LOG_LEVELS:
        raise ValueError(f"Invalid value for environment variable ISS_RNN_LOG_LEVEL: {log_level}")

    return {
        'THREADS': threads_value,
        'LOG_LEVEL': log_level,
        'DATA_DIR': os.getenv('ISS_RNN_DATA_DIR', 'data'),
        'CORPUS_URL': os.getenv('ISS_RNN_CORPUS_URL', DEFAULT_CORPUS_URL),
    }


@dataclass
class ModelConfig:
    kind: str = 'lstm_stack'
    embed_dim: int = 64
    hidden_sizes: List[int] = field(default_factory=lambda: [64, 64])
    width: int = 64
    depth: int = 3
    coupled_c: bool = False
    tied: bool = False

    def __post_init__(self):
        if self.kind not in ('lstm_stack', 'rhn'):
            raise ParameterError(f"model kind must be 'lstm_stack' or 'rhn', got {self.kind!r}")
        if self.kind == 'rhn' and self.embed_dim != self.width:
            raise ParameterError(f"RHN models need embed_dim == width, got {self.embed_dim} and {self.width}")


@dataclass
class DataConfig:
    path: Optional[str] = None
    url: Optional[str] = None
    max_bytes: Optional[int] = 50_000
    valid_fraction: float = 0.1
    bundled: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> Dict[str, Any]:
        reg = asdict(self.reg)
        reg['lambda'] = reg.pop('lam')
        return {'model': asdict(self.model), 'train': asdict(self.train), 'reg': reg, 'data': asdict(self.data)}

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())

    def with_overrides(self, section: str, **values: Any) -> 'ExperimentConfig':
        """Replace fields of one section; ``None`` values are ignored so unset flags keep file values."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except ParameterError as e:
            raise ConfigError(f"invalid override for '{section}': {str(e)}")


_SECTIONS = {'model': ModelConfig, 'train': TrainConfig, 'reg': RegConfig, 'data': DataConfig}


def _section(name: str, values: Mapping[str, Any], defaults: Mapping[str, Any]):
    cls = _SECTIONS[name]
    if not isinstance(values, Mapping):
        raise ConfigError(f"config section '{name}' must be an object")
    values = dict(values)
    if name == 'reg' and 'lambda' in values:
        values['lam'] = values.pop('lambda')
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"Unknown config key: {name}.{key}")
    try:
        return cls(**{**defaults, **values})
    except (ParameterError, TypeError) as e:
        raise ConfigError(f"Invalid config section '{name}': {str(e)}")


def experiment_config_from_dict(document: Mapping[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig, rejecting unknown keys at any level.

    Raises:
        ConfigError: If a key is unknown or a value is invalid.
    """
    for key in document:
        if key not in _SECTIONS:
            raise ConfigError(f"Unknown config key: {key}")
    model = _section('model', document.get('model', {}), {})
    return ExperimentConfig(
        model=model,
        train=_section('train', document.get('train', {}), {}),
        reg=_section('reg', document.get('reg', {}), {'tau': DEFAULT_TAU[model.kind]}),
        data=_section('data', document.get('data', {}), {}),
    )


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    """Read an experiment config JSON file, or return the defaults when ``path`` is None."""
    if path is None:
        return experiment_config_from_dict({})
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {str(e)}")
    if not isinstance(document, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    logger.debug("Loaded experiment config from %s", path)
    return experiment_config_from_dict(document)
