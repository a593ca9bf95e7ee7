"""
Run configuration: one flat dataclass, layered from defaults, a dataset
preset, a TOML file, PROTOSHIFT_* environment variables, --set overrides and
dedicated CLI flags (in that order, later layers win).
"""

import dataclasses
import hashlib
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import orjson

from data_bench import AugmentPolicy, DomainScenario
from errors import ConfigError
from linalg_core import SharpenConfig
from losses import LossWeights
from model_grad import OptimizerState
from prototype_store import SimilarityConfig
from pseudo_label import PseudoLabelConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = 'PROTOSHIFT_'

# Fields that change where or how a run reports, never what it computes
OUTPUT_ONLY_FIELDS = ('out', 'metrics_port', 'workers', 'log_file')

PRESETS: Dict[str, Dict[str, Any]] = {
    'visda': {'tau2': 0.4, 'lambda_batch': 0.1},
    'domainnet': {'tau2': 0.3, 'lambda_batch': 1.0},
    'office_home': {'tau2': 0.1, 'lambda_batch': 1.0},
}

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


@dataclass
class RunConfig:
    """Everything a training run depends on"""
    # Synthetic scenario (ignored when csv_path is set)
    class_count: int = 5
    input_dim: int = 2
    source_samples: int = 500
    target_samples: int = 515
    shots: int = 3
    rotation_deg: float = 30.0
    translation: float = 0.5
    target_scale: float = 1.0
    class_radius: float = 2.0
    class_std: float = 0.5
    csv_path: Optional[str] = None

    # Augmentation stand-ins
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    strong_dropout_prob: float = 0.2

    # Model
    hidden_dims: Tuple[int, ...] = (64,)
    feature_dim: int = 16

    # Thresholds, temperatures, prototype momentum, transport solver
    tau1: float = 0.95
    tau2: float = 0.4
    t1: float = 0.05
    t2: float = 0.1
    alpha: float = 0.9
    ot_epsilon: float = 0.05
    ot_max_iters: int = 1000
    ot_tolerance: float = 1e-6
    ot_unbalanced: bool = False
    inter_norm_axis: str = 'samples'

    # Loss weights
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_batch: float = 1.0

    # Optimizer and batching
    lr: float = 0.05
    momentum: float = 0.9
    lr_gamma: float = 0.0
    lr_power: float = 0.75
    steps: int = 500
    batch_source: int = 32
    batch_labeled: int = 16
    batch_unlabeled: int = 64

    # Run bookkeeping
    seed: int = 0
    out: str = 'runs/default'
    metrics_every: int = 50

    # Ablation mask and training switches
    use_intra: bool = True
    use_inter: bool = True
    use_batch: bool = True
    use_prototype_ema: bool = True
    use_linear_branch: bool = True
    use_proto_branch: bool = True
    route_prototype_grads: bool = False
    full_dataset_ot: bool = False

    preset: Optional[str] = None
    metrics_port: Optional[int] = None
    workers: int = 0
    log_file: Optional[str] = None

    def validate(self) -> 'RunConfig':
        """Re-check every constraint the owning modules enforce; raise ConfigError"""
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.ot_unbalanced:
            raise ConfigError("ot_unbalanced is reserved and not implemented")
        checks = [
            (0.0 < self.alpha < 1.0, f"alpha must lie in (0, 1), got {self.alpha}"),
            (self.ot_epsilon > 0, f"ot_epsilon must be positive, got {self.ot_epsilon}"),
            (self.ot_max_iters >= 1, "ot_max_iters must be at least 1"),
            (self.ot_tolerance > 0, "ot_tolerance must be positive"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (0.0 <= self.momentum < 1.0, f"momentum must lie in [0, 1), got {self.momentum}"),
            (self.lr_gamma >= 0 and self.lr_power >= 0, "lr_gamma and lr_power must be non-negative"),
            (self.steps >= 0, "steps must be non-negative"),
            (min(self.batch_source, self.batch_labeled, self.batch_unlabeled) >= 1, "batch sizes must be >= 1"),
            (self.metrics_every >= 1, "metrics_every must be at least 1"),
            (self.feature_dim >= 1 and all(h >= 1 for h in self.hidden_dims), "layer widths must be >= 1"),
            (self.workers >= 0, "workers must be >= 0 (0 picks the physical core count)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            self.pseudo_label_config()
            self.sharpen_config()
            self.similarity_config()
            self.loss_weights()
            self.augment_policy()
            if self.csv_path is None:
                self.scenario().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def scenario(self) -> DomainScenario:
        return DomainScenario(class_count=self.class_count, input_dim=self.input_dim,
                              source_samples=self.source_samples, target_samples=self.target_samples,
                              shots=self.shots, rotation_deg=self.rotation_deg, translation=self.translation,
                              target_scale=self.target_scale, class_radius=self.class_radius,
                              class_std=self.class_std, seed=self.seed)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.weak_noise_sigma, self.strong_noise_sigma, self.strong_dropout_prob, self.seed)

    def pseudo_label_config(self) -> PseudoLabelConfig:
        return PseudoLabelConfig(tau1=self.tau1, tau2=self.tau2)

    def sharpen_config(self) -> SharpenConfig:
        return SharpenConfig(temperature_t2=self.t2)

    def similarity_config(self) -> SimilarityConfig:
        return SimilarityConfig(temperature_t1=self.t1, norm_axis=self.inter_norm_axis)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_intra, self.lambda_inter, self.lambda_batch)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(learning_rate=self.lr, momentum=self.momentum,
                              lr_gamma=self.lr_gamma, lr_power=self.lr_power)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump, excluding output-only fields"""
        payload = {k: v for k, v in self.to_dict().items() if k not in OUTPUT_ONLY_FIELDS}
        return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()

    def with_overrides(self, **changes) -> 'RunConfig':
        return apply_layer(self, changes, source='override')


FIELD_TYPES = typing.get_type_hints(RunConfig)
FIELD_NAMES = tuple(f.name for f in dataclasses.fields(RunConfig))


def _coerce(name: str, value: Any, source: str):
    target = FIELD_TYPES[name]
    origin = typing.get_origin(target)
    args = typing.get_args(target)
    optional = origin is typing.Union and type(None) in args
    if optional:
        target = next(a for a in args if a is not type(None))
        origin = typing.get_origin(target)
        if value is None or (isinstance(value, str) and value.strip().lower() in ('', 'none', 'null')):
            return None

    try:
        if origin is tuple:
            if isinstance(value, str):
                parts = [p for p in value.replace(' ', '').split(',') if p]
            elif isinstance(value, (list, tuple)):
                parts = list(value)
            else:
                parts = [value]
            return tuple(int(p) for p in parts)
        if target is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if target is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if target is float:
            if isinstance(value, bool):
                raise ValueError(f"not a number: {value!r}")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: cannot read {name}={value!r} as {FIELD_TYPES[name]}: {e}") from None


def apply_layer(config: RunConfig, values: Mapping[str, Any], source: str) -> RunConfig:
    unknown = sorted(set(values) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"{source}: unknown config keys {unknown}")
    coerced = {k: _coerce(k, v, source) for k, v in values.items()}
    return dataclasses.replace(config, **coerced)


def read_toml(path: str) -> Dict[str, Any]:
    """Flat key/value TOML; tables are flattened so [ablation] use_intra = false also works"""
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    flat = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {name: environ[ENV_PREFIX + name.upper()] for name in FIELD_NAMES
            if ENV_PREFIX + name.upper() in environ}


def parse_set_args(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(config_path: Optional[str] = None, set_args: Sequence[str] = (),
                flags: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Build a validated RunConfig from every layer"""
    file_values = read_toml(config_path) if config_path else {}
    env_values = env_overrides(environ)
    set_values = parse_set_args(set_args)
    flag_values = {k: v for k, v in (flags or {}).items() if v is not None}
    layers = [(config_path or 'config file', file_values), ('environment', env_values),
              ('--set', set_values), ('flags', flag_values)]

    # The preset is itself layered; whichever layer names it last wins
    preset = None
    for source, values in layers:
        if 'preset' in values:
            preset = _coerce('preset', values['preset'], source)

    config = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        config = apply_layer(config, dict(PRESETS[preset], preset=preset), source=f"preset {preset}")
    for source, values in layers:
        if values:
            config = apply_layer(config, values, source)
    return config.validate()
