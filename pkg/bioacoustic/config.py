"""
RunConfig: every tunable of the pipeline as one pydantic model.

Externally the config is a flat set of namespaced keys (``postproc.nms_iou``).
Values come, in increasing priority, from field defaults, a ``key = value``
config file, ``FSBED_``-prefixed environment variables and ``--set`` flags.
"""

import logging
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ENV_PREFIX = 'FSBED_'


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class FeatureConfig(_Section):
    sample_rate: int = Field(22050, gt=0, description='Target sample rate in Hz.')
    n_fft: int = Field(1024, gt=0, description='FFT size.')
    hop_length: int = Field(256, gt=0, description='STFT hop in samples.')
    n_mels: int = Field(128, ge=1, description='Number of mel bands.')
    fmin: float = Field(0.0, ge=0, description='Lowest mel filter edge in Hz.')
    fmax: Optional[float] = Field(None, description='Highest mel filter edge in Hz (default sr/2).')
    kind: Literal['logmel', 'pcen'] = Field('logmel', description='Feature type fed to the model.')
    log_floor: float = Field(1e-10, gt=0, description='Floor added to mel power before the natural log.')
    pcen_s: float = Field(0.025, gt=0, le=1, description='PCEN smoother coefficient.')
    pcen_alpha: float = Field(0.98, ge=0, description='PCEN gain exponent.')
    pcen_delta: float = Field(2.0, gt=0, description='PCEN bias.')
    pcen_r: float = Field(0.5, gt=0, description='PCEN root compression exponent.')
    pcen_eps: float = Field(1e-6, gt=0, description='PCEN stabiliser.')
    window_frames: int = Field(431, ge=1, description='Frames per model window.')
    window_shift: int = Field(86, ge=1, description='Frame shift between consecutive windows.')

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop_length


class ModelConfig(_Section):
    channels: int = Field(64, ge=1, description='CNN channels per block; also the embedding dim d and encoder dim D.')
    n_blocks: int = Field(2, ge=1, description='NetMamba blocks in the encoder.')
    d_inner: int = Field(128, ge=1, description='Inner channel dim E of each NetMamba block.')
    d_state: int = Field(16, ge=1, description='SSM state size N.')
    conv_width: int = Field(4, ge=1, description='Causal conv kernel width.')
    dt_min: float = Field(0.001, gt=0, description='Lower bound of the initial step size.')
    dt_max: float = Field(0.1, gt=0, description='Upper bound of the initial step size.')
    exact_zoh_b: bool = Field(False, description='Use exact ZOH for B instead of B_bar = delta * B.')
    bn_eps: float = Field(1e-5, gt=0, description='Batch-norm epsilon.')
    bn_momentum: float = Field(0.1, gt=0, le=1, description='Batch-norm running-stat momentum.')
    dtype: Literal['float32', 'float64'] = Field('float32', description='Floating type of parameters and activations.')


class TrainConfig(_Section):
    n_episodes: int = Field(500, ge=0, description='Training episodes.')
    n_classes: int = Field(2, ge=1, description='Classes sampled per episode.')
    windows_per_class: int = Field(2, ge=1, description='Support windows sampled per class.')
    queries_per_class: int = Field(1, ge=0, description='Query windows sampled per class (monitoring only).')
    lr: float = Field(1e-3, ge=0, description='Adam learning rate.')
    beta1: float = Field(0.9, ge=0, lt=1, description='Adam beta1.')
    beta2: float = Field(0.999, ge=0, lt=1, description='Adam beta2.')
    adam_eps: float = Field(1e-8, gt=0, description='Adam epsilon.')
    checkpoint_every: int = Field(50, ge=1, description='Write params every k episodes.')
    log_every: int = Field(10, ge=1, description='Log losses every k episodes.')
    pseudo_episodes: int = Field(100, ge=0, description='Episodes after adding pseudo-labelled weak data.')


class AugmentConfig(_Section):
    noise_sigma: float = Field(0.1, ge=0, description='Gaussian noise std as a fraction of the feature std.')
    n_freq_masks: int = Field(2, ge=0, description='Frequency masks per window.')
    max_freq_width: int = Field(16, ge=1, description='Max frequency mask width in bins.')
    n_time_masks: int = Field(2, ge=0, description='Time masks per window.')
    max_time_width: int = Field(32, ge=1, description='Max time mask width in frames.')
    pseudo_confidence: float = Field(0.8, ge=0, description='Min mean probability of a kept pseudo event.')


class FewshotConfig(_Section):
    n_support: int = Field(5, ge=1, description='POS events per file used as support.')
    finetune_sed: bool = Field(False, description='Fine-tune a binary SED head on the supports with pseudo-label cycles.')
    finetune_sfbc: bool = Field(False, description='Fine-tune the FBC head through the transferred encoder.')
    n_cycles: int = Field(3, ge=1, description='Pseudo-label cycles of SED fine-tuning.')
    pseudo_hi: float = Field(0.85, ge=0, le=1, description='Query frames above this become POS pseudo-labels.')
    pseudo_lo: float = Field(0.15, ge=0, le=1, description='Query frames below this become NEG pseudo-labels.')
    head_steps: int = Field(300, ge=1, description='Optimisation steps when fitting a binary head.')
    head_lr: float = Field(0.05, gt=0, description='Learning rate when fitting a binary head.')


class PostprocConfig(_Section):
    base_threshold: float = Field(0.5, gt=0, lt=1, description='Threshold before adjustment.')
    threshold_delta: float = Field(0.05, ge=0, description='Amount subtracted from the threshold.')
    threshold_floor: float = Field(0.5, ge=0, le=1, description='Lowest adjusted threshold.')
    threshold_from_support: bool = Field(False, description='Use the mean support POS probability as base threshold.')
    nms_iou: float = Field(0.7, gt=0, le=1, description='NMS IoU cutoff.')
    mfl_frames: Optional[int] = Field(None, ge=1, description='Minimum event length in frames (default: derived from supports).')
    mfl_min_frames: int = Field(5, ge=1, description='Lower bound of the derived MFL.')
    mfl_support_fraction: float = Field(0.5, gt=0, description='Derived MFL as a fraction of the shortest support event.')
    merge_gap_frames: int = Field(87, ge=1, description='Gaps shorter than this can be merged (87 frames ~ 1 s at 22050/256).')
    merge_prob: float = Field(0.5, ge=0, le=1, description='Mean probability a merged run must exceed.')
    merge_length_factor: float = Field(2.0, gt=0, description='Mean event length must exceed this many MFLs to merge.')
    smooth_window: int = Field(5, ge=1, description='Moving-average window in frames.')
    median_kernel: int = Field(3, ge=1, description='Median filter size (odd).')
    smooth_first: bool = Field(True, description='Smooth before thresholding; false smooths the binarized curve.')

    @model_validator(mode='after')
    def _odd_median(self):
        if self.median_kernel % 2 == 0:
            raise ValueError('postproc.median_kernel must be odd')
        return self


class EvaluateConfig(_Section):
    min_iou: float = Field(0.3, gt=0, le=1, description='IoU needed for a match.')
    skip_support: bool = Field(True, description='Only score events after the last support POS offset.')
    matching: Literal['greedy', 'optimal'] = Field('greedy', description='Event matching strategy.')


class RunConfig(_Section):
    seed: int = Field(0, ge=0, description='Root seed for every random stream.')
    jobs: int = Field(1, ge=1, description='Files processed in parallel.')
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    fewshot: FewshotConfig = Field(default_factory=FewshotConfig)
    postproc: PostprocConfig = Field(default_factory=PostprocConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)


def iter_config_keys(model_cls=RunConfig, prefix=''):
    """Yield (flat key, default, description) for every leaf field."""
    for name, field in model_cls.model_fields.items():
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            yield from iter_config_keys(annotation, f'{prefix}{name}.')
        else:
            yield f'{prefix}{name}', field.get_default(call_default_factory=True), field.description or ''


def config_help():
    lines = ['config keys (key = default: description):']
    for key, default, description in iter_config_keys():
        lines.append(f'  {key} = {default}: {description}')
    return '\n'.join(lines)


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f'cannot read config file {path}: {exc}') from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{path}:{lineno}: expected "key = value", got {raw!r}')
        key, value = line.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def env_overrides(environ=None, prefix=DEFAULT_ENV_PREFIX):
    """Map ``FSBED_SECTION__FIELD`` variables to ``section.field`` keys."""
    environ = os.environ if environ is None else environ
    known = {key for key, _, _ in iter_config_keys()}
    values = {}
    for name, value in environ.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):].lower().replace('__', '.')
        # Non-config FSBED_* variables (paths, debug switch) are settings, not keys.
        if key in known:
            values[key] = value
    return values


def parse_overrides(pairs):
    values = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigError(f'--set expects key=value, got {pair!r}')
        key, value = pair.split('=', 1)
        values[key.strip()] = value.strip()
    return values


def _nest(flat):
    nested = {}
    for key, value in flat.items():
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f'config key {key!r} collides with a scalar key')
        if isinstance(value, str) and value.lower() in ('none', 'null', ''):
            value = None
        node[parts[-1]] = value
    return nested


def build_config(flat=None):
    """Validate a flat key dict into a RunConfig, rejecting unknown keys."""
    flat = dict(flat or {})
    known = {key for key, _, _ in iter_config_keys()}
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f'unknown config keys: {", ".join(unknown)}')
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path=None, overrides=None, environ=None, prefix=DEFAULT_ENV_PREFIX):
    flat = {}
    if path:
        flat.update(read_config_file(path))
    flat.update(env_overrides(environ, prefix))
    flat.update(overrides or {})
    config = build_config(flat)
    logger.debug('effective config: %s', dump_config(config))
    return config


def flatten_config(config):
    flat = {}

    def walk(node, prefix):
        for name, value in node:
            if isinstance(value, BaseModel):
                walk(value, f'{prefix}{name}.')
            else:
                flat[f'{prefix}{name}'] = value

    walk(config, '')
    return flat


def dump_config(config):
    return '\n'.join(f'{key} = {value}' for key, value in flatten_config(config).items())


def write_config(config, path):
    Path(path).write_text(dump_config(config) + '\n', encoding='utf-8')
