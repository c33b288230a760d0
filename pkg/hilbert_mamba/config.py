'''Run configuration: YAML file, then flag overrides, then HVLM_SEED.

Keys (all optional in a file)::

    seed, lr, steps, batch_size, optimizer
    channels, d_state, hilbert_variant, memory, memory_depth, gate_kernel,
    chunk, bidirectional, hmca_interaction
    cls_steps, cls_lr, cls_batch_size, cls_width, lam, tau, use_prompt,
    text_as_query, text_tokens, visual_grid
    jobs, extent, n_train, n_test
'''
from dataclasses import asdict, dataclass, fields, replace
import os

import yaml

from .base import FormatError, ParameterError, StateError
from .blocks import INTERACTIONS
from .hilbert_codec import SCHEMES
from .importer import atomic_write, load_checkpoint
from .net import HilbertMambaSegmenter, SegModelConfig
from .prompt_fusion import ClassifierConfig, PromptClassifier
from .synth import SynthSpec
from .training import OPTIMIZERS


SEED_ENV = 'HVLM_SEED'


@dataclass
class RunConfig(object):
    seed: int = None
    lr: float = 3e-3
    steps: int = 200
    batch_size: int = 1
    optimizer: str = 'adam'
    channels: int = 4
    d_state: int = 8
    hilbert_variant: str = 'hilbert'
    memory: bool = True
    memory_depth: int = 2
    gate_kernel: int = 1
    chunk: int = 64
    bidirectional: bool = False
    hmca_interaction: str = 'attention'
    cls_steps: int = 200
    cls_lr: float = 3e-3
    cls_batch_size: int = 4
    cls_width: int = 16
    lam: float = 0.5
    tau: float = 0.1
    use_prompt: bool = True
    text_as_query: bool = True
    text_tokens: int = 96
    visual_grid: int = 4
    jobs: int = 1
    extent: int = 32
    n_train: int = 60
    n_test: int = 20

    def __post_init__(self):
        self._check_types()
        if self.hilbert_variant not in SCHEMES:
            raise ParameterError('hilbert_variant must be one of {0}, got '
                                 '{1!r}'.format(SCHEMES, self.hilbert_variant))
        if self.hmca_interaction not in INTERACTIONS:
            raise ParameterError('hmca_interaction must be one of {0}, got '
                                 '{1!r}'.format(INTERACTIONS,
                                                self.hmca_interaction))
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError('optimizer must be one of {0}, got '
                                 '{1!r}'.format(sorted(OPTIMIZERS),
                                                self.optimizer))
        if self.gate_kernel not in (1, 3):
            raise ParameterError('gate_kernel must be 1 or 3')
        if self.lam < 0 or self.tau <= 0:
            raise ParameterError('lam must be >= 0 and tau > 0')
        for name in ('jobs', 'batch_size', 'cls_batch_size', 'channels',
                     'd_state', 'chunk', 'memory_depth'):
            if getattr(self, name) < 1:
                raise ParameterError('{0} must be at least 1'.format(name))
        for name in ('steps', 'cls_steps', 'n_train', 'n_test'):
            if getattr(self, name) < 0:
                raise ParameterError('{0} must be non-negative'.format(name))

    def _check_types(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None and f.default is None:
                continue
            if f.type is float and isinstance(value, int) and \
                    not isinstance(value, bool):
                setattr(self, f.name, float(value))
                continue
            if isinstance(value, bool) != (f.type is bool) or \
                    not isinstance(value, f.type):
                raise ParameterError('{0} must be {1}, got {2!r}'.format(
                    f.name, f.type.__name__, value))

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise ParameterError('unknown config keys: {0}'.format(
                ', '.join(unknown)))
        return cls(**data)

    @classmethod
    def from_filename(cls, filename):
        with open(filename) as f:
            data = yaml.safe_load(f)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ParameterError('{0}: a config file holds a mapping'.format(
                filename))
        return cls.from_dict(data)

    def merged(self, **overrides):
        '''A copy with every non-None override applied'''
        return replace(self, **dict(
            (k, v) for k, v in overrides.items() if v is not None))

    def resolved(self):
        '''Fill the seed from HVLM_SEED (or 0) when nothing set it'''
        if self.seed is not None:
            return self
        try:
            seed = int(os.environ.get(SEED_ENV, 0))
        except ValueError:
            raise ParameterError('{0} must be an integer, got {1!r}'.format(
                SEED_ENV, os.environ[SEED_ENV]))
        return replace(self, seed=seed)

    def to_dict(self):
        return asdict(self)

    def seg_model_config(self):
        return SegModelConfig(
            base_channels=self.channels, d_state=self.d_state,
            scan_order=self.hilbert_variant, memory=self.memory,
            memory_depth=self.memory_depth, gate_kernel=self.gate_kernel,
            chunk=self.chunk, bidirectional=self.bidirectional,
            hmca_interaction=self.hmca_interaction, seed=self.seed or 0)

    def classifier_config(self):
        return ClassifierConfig(
            d_model=self.cls_width, d_state=self.d_state,
            visual_grid=self.visual_grid, text_tokens=self.text_tokens,
            use_prompt=self.use_prompt, text_as_query=self.text_as_query,
            chunk=self.chunk, seed=self.seed or 0)

    def synth_spec(self, n=None):
        return SynthSpec(n=n if n is not None else self.n_train + self.n_test,
                         extent=self.extent)


def load_run_config(filename=None, **overrides):
    cfg = RunConfig.from_filename(filename) if filename else RunConfig()
    return cfg.merged(**overrides).resolved()


MODEL_KINDS = {
    'segmenter': (HilbertMambaSegmenter, SegModelConfig),
    'classifier': (PromptClassifier, ClassifierConfig),
}


def sidecar_name(checkpoint):
    return checkpoint + '.yaml'


def write_sidecar(checkpoint, model):
    '''Record what kind of model a checkpoint holds and its config'''
    kind = next(k for k, (cls, _) in MODEL_KINDS.items()
                if isinstance(model, cls))
    with atomic_write(sidecar_name(checkpoint), binary=False) as f:
        yaml.safe_dump({'kind': kind, 'config': asdict(model.cfg)}, f,
                       default_flow_style=False, sort_keys=True)


def read_sidecar(checkpoint):
    name = sidecar_name(checkpoint)
    if not os.path.exists(name):
        raise StateError('checkpoint {0} has no config sidecar {1}'.format(
            checkpoint, name))
    with open(name) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict) or data.get('kind') not in MODEL_KINDS:
        raise StateError('{0} does not describe a known model'.format(name))
    return data['kind'], data.get('config') or {}


def load_model(checkpoint, kind=None):
    '''Rebuild a trained model from a checkpoint and its sidecar'''
    if not os.path.exists(checkpoint):
        raise StateError('missing checkpoint {0}'.format(checkpoint))
    found, config = read_sidecar(checkpoint)
    if kind is not None and found != kind:
        raise StateError('{0} holds a {1}, expected a {2}'.format(
            checkpoint, found, kind))
    model_class, config_class = MODEL_KINDS[found]
    try:
        model = model_class(config_class(**config))
    except TypeError as e:
        raise FormatError('{0} holds an unusable {1} config: {2}'.format(
            sidecar_name(checkpoint), found, e))
    model.load_state_dict(load_checkpoint(checkpoint))
    model.trained = True
    return model
