import dataclasses
import hashlib
import json
import logging
import os
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from dualdistill.common import (IMAGENET_MEAN, IMAGENET_STD, TEXTURE_CATEGORIES,
                                ConfigError, PathLike)

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = 'DUALDISTILL_DATA_ROOT'
BACKBONE_KINDS = ('wideresnet50', 'toy')
FOREGROUND_MODES = ('auto', 'full', 'background-stat', 'graphcut', 'precomputed')
BRANCH_MODES = ('both', 'normality', 'abnormality')
_PATH_FIELDS = ('dataset_root', 'output_dir')


@dataclass
class SynthesisConfig:
    beta_range: Tuple[float, float] = (0.15, 1.0)
    noise_threshold: float = 0.5
    freq_choices: Tuple[int, ...] = (2, 4, 8, 16, 32)
    texture_source: str = 'self'
    foreground_mode: str = 'auto'
    foreground_tau: float = 4.0

    def validate(self):
        lo, hi = self.beta_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError('beta_range must satisfy 0 < lo <= hi <= 1, got {}'.format(
                self.beta_range))
        if not self.freq_choices:
            raise ConfigError('freq_choices is empty')
        for freq in self.freq_choices:
            if freq < 1 or freq & (freq - 1):
                raise ConfigError('freq_choices must be powers of two, got {}'.format(freq))
        if self.foreground_mode not in FOREGROUND_MODES:
            raise ConfigError('Unknown foreground_mode `{}`, expected one of {}'.format(
                self.foreground_mode, ', '.join(FOREGROUND_MODES)))
        if self.texture_source != 'self' and not Path(self.texture_source).is_dir():
            raise ConfigError('texture_source `{}` is not a directory'.format(
                self.texture_source))

    def resolve_foreground_mode(self, category: str, fas: bool) -> str:
        '''Foreground method for `category`; `full` when synthesis ignores foregrounds'''
        if not fas:
            return 'full'
        if self.foreground_mode == 'auto':
            return 'full' if category in TEXTURE_CATEGORIES else 'background-stat'
        return self.foreground_mode


@dataclass
class AblationFlags:
    '''Component switches of the ablation sweeps.

        `branches` keeps both student branches or only one of them; `msn`
        off replaces pyramid upsampling and the trained head with a plain
        sum of the stage maps.
    '''
    pmn_inner: bool = True
    pmn_outer: bool = True
    fas: bool = True
    pu: bool = True
    mm: bool = True
    branches: str = 'both'
    msn: bool = True

    @property
    def use_normality(self) -> bool:
        return self.branches != 'abnormality'

    @property
    def use_abnormality(self) -> bool:
        return self.branches != 'normality'

    @property
    def pyramid_upsampling(self) -> bool:
        return self.pu and self.msn

    def validate(self):
        if self.branches not in BRANCH_MODES:
            raise ConfigError('Unknown branches `{}`, expected one of {}'.format(
                self.branches, ', '.join(BRANCH_MODES)))


@dataclass
class BackboneSpec:
    kind: str = 'wideresnet50'
    stage_channels: Tuple[int, ...] = (256, 512, 1024, 2048)
    input_size: int = 256
    pretrained: bool = True

    @classmethod
    def toy(cls, input_size: int = 64) -> 'BackboneSpec':
        return cls(kind='toy', stage_channels=(8, 16, 32, 64),
                   input_size=input_size, pretrained=False)

    @classmethod
    def wideresnet50(cls, input_size: int = 256, pretrained: bool = True) -> 'BackboneSpec':
        return cls(kind='wideresnet50', stage_channels=(256, 512, 1024, 2048),
                   input_size=input_size, pretrained=pretrained)

    @property
    def stage_sizes(self) -> Tuple[int, ...]:
        return tuple(self.input_size // 2 ** (i + 2) for i in range(4))

    def validate(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError('Unknown backbone `{}`'.format(self.kind))
        if len(self.stage_channels) != 4:
            raise ConfigError('Backbone needs 4 stages, got {}'.format(
                len(self.stage_channels)))
        if self.input_size % 32:
            raise ConfigError('input_size must be a multiple of 32, got {}'.format(
                self.input_size))


@dataclass
class RunConfig:
    '''Everything one training / evaluation run depends on.

        Flat on disk: every field (and every field of the nested synthesis
        and ablation configs) is a top-level TOML key.
    '''
    backbone: str = 'wideresnet50'
    input_size: int = 256
    epochs: int = 100
    category_epochs: Dict[str, int] = field(default_factory=dict)
    lr: float = 0.005
    head_lr: float = 0.005
    batch_size: int = 8
    ngm_weight: float = 1.0
    aim_weight: float = 1.0
    trainable_trunk: bool = True
    decouple_init_std: float = 0.0
    pmn_width: Optional[int] = None
    top_k: int = 100
    score_extra_sigmoid: bool = False
    seed: int = 0
    fpr_limit: float = 0.3
    pro_max_thresholds: int = 10000
    dataset_root: str = 'data'
    category: str = 'toy_shapes'
    output_dir: str = 'runs'
    num_workers: int = 0
    device: str = 'cpu'
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)

    @property
    def backbone_spec(self) -> BackboneSpec:
        if self.backbone == 'toy':
            return BackboneSpec.toy(self.input_size)
        return BackboneSpec.wideresnet50(self.input_size)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.category

    def epochs_for(self, category: Optional[str] = None) -> int:
        return self.category_epochs.get(category or self.category, self.epochs)

    def validate(self) -> 'RunConfig':
        if self.backbone not in BACKBONE_KINDS:
            raise ConfigError('Unknown backbone `{}`, expected one of {}'.format(
                self.backbone, ', '.join(BACKBONE_KINDS)))
        self.backbone_spec.validate()
        for name in ('epochs', 'batch_size', 'top_k', 'pro_max_thresholds'):
            if getattr(self, name) < 1:
                raise ConfigError('`{}` must be positive, got {}'.format(
                    name, getattr(self, name)))
        for name, value in self.category_epochs.items():
            if value < 1:
                raise ConfigError('category_epochs.{} must be positive'.format(name))
        if self.top_k > self.input_size ** 2:
            raise ConfigError('top_k {} exceeds the pixel count'.format(self.top_k))
        if self.lr <= 0 or self.head_lr <= 0:
            raise ConfigError('Learning rates must be positive')
        if not 0 < self.fpr_limit <= 1:
            raise ConfigError('fpr_limit must lie in (0, 1], got {}'.format(self.fpr_limit))
        if self.decouple_init_std < 0:
            raise ConfigError('decouple_init_std must be non-negative')
        if any(s <= 0 for s in self.std):
            raise ConfigError('std constants must be positive')
        self.synthesis.validate()
        self.flags.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        '''Flat dictionary, the same shape as the config file'''
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                flat.update(dataclasses.asdict(value))
            else:
                flat[f.name] = value
        return {key: (list(value) if isinstance(value, tuple) else value)
                for key, value in flat.items()}

    def fingerprint(self) -> str:
        '''Stable hash of the numeric and flag fields; paths do not count'''
        canonical = self.to_dict()
        for name in _PATH_FIELDS:
            canonical.pop(name)
        canonical['texture_source'] = (
            'self' if canonical['texture_source'] == 'self' else 'dir')
        canonical.pop('num_workers')
        canonical.pop('device')
        text = json.dumps(canonical, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> 'RunConfig':
        return from_flat({**self.to_dict(), **overrides})


def _nested_names(cls) -> Iterable[str]:
    return [f.name for f in dataclasses.fields(cls)]


def from_flat(values: Mapping[str, Any]) -> RunConfig:
    '''Builds a `RunConfig` from a flat key -> value mapping'''
    synth_keys = set(_nested_names(SynthesisConfig))
    flag_keys = set(_nested_names(AblationFlags))
    top_keys = set(_nested_names(RunConfig)) - {'synthesis', 'flags'}

    unknown = set(values) - synth_keys - flag_keys - top_keys
    if unknown:
        raise ConfigError('Unknown config key{}: `{}`'.format(
            's' if len(unknown) > 1 else '', '`, `'.join(sorted(unknown))))

    def _pick(keys, cls):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in keys and f.name in values:
                value = values[f.name]
                kwargs[f.name] = tuple(value) if isinstance(value, list) else value
        return kwargs

    try:
        synthesis = SynthesisConfig(**_pick(synth_keys, SynthesisConfig))
        flags = AblationFlags(**_pick(flag_keys, AblationFlags))
        top = _pick(top_keys, RunConfig)
        if 'category_epochs' in top:
            top['category_epochs'] = dict(top['category_epochs'])
        return RunConfig(synthesis=synthesis, flags=flags, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> Dict[str, Any]:
    '''`KEY=VALUE` with VALUE parsed as a TOML value; bare words are strings'''
    if '=' not in text:
        raise ConfigError('Override `{}` is not of the form KEY=VALUE'.format(text))
    key, raw = (part.strip() for part in text.split('=', 1))
    try:
        return tomllib.loads('{} = {}'.format(key, raw))
    except tomllib.TOMLDecodeError:
        return {key: raw}


def load_config(path: Optional[PathLike] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    '''Reads a flat TOML config, applies overrides and the data-root
    environment variable, and validates the result.'''
    values: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, 'rb') as fh:
                values.update(tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError('Config file not found: {}'.format(path)) from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError('Malformed config file {}: {}'.format(path, exc)) from exc
    if os.environ.get(DATA_ROOT_ENV):
        values['dataset_root'] = os.environ[DATA_ROOT_ENV]
    values.update(overrides or {})
    config = from_flat(values).validate()
    logger.debug('Config fingerprint {}'.format(config.fingerprint()))
    return config
