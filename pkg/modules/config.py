import dataclasses
import json
import pathlib
from dataclasses import dataclass

from modules.errors import ConfigError

TASKS = ('smm', 'vdt')
# primary modality first for smm; vdt fuses every modality
TASK_MODALITIES = {
    'smm': ('depth', 'event', 'lidar'),
    'vdt': ('visible', 'depth', 'thermal'),
}
SMM_PRIMARY = 'rgb'
FUSION_MECHANISMS = ('pwrf', 'addition', 'concatenation', 'attention',
                     'em_routing')
LR_SCHEDULES = ('constant', 'poly', 'step')
SPLIT_WEIGHTINGS = ('uniform', 'activation')


@dataclass(frozen=True)
class PipelineConfig:
    """All hyperparameters of one experiment.

    Parameters
    ----------
    seed: int
        Mandatory. Drives parameter init, data generation and batching.

    task: {'smm', 'vdt'}, default='smm'
        Multi-modal segmentation or triple-modal saliency.

    modality_count: {2, 3}, default=3
        Number of modalities routed through the fusion block.

    modalities: tuple of str, default=None
        Explicit subset of the task's fused modalities. When None the first
        ``modality_count`` names of ``TASK_MODALITIES[task]`` are used.

    capsule_types: int, default=8
        Part-level capsule types per modality.

    whole_types: int, default=None
        Whole-level capsule types. None means the task's category count.

    routing_iters: int, default=3
        EM iterations, each with inverse temperature ``lambda_schedule[t]``.

    share_params: bool, default=True
        Share capsule construction, disentangling and vote transforms across
        modality branches.

    fusion_mechanism: {'pwrf', 'addition', 'concatenation', 'attention',
        'em_routing'}, default='pwrf'
        Drop-in replacement for the fusion block, used by the ablation sweep.

    sub_decoders: {1, 2}, default=2
        Number of stacked sub-decoders in the saliency decoder.

    target_metric: float, default=None
        Stop training after the first epoch whose logged metric reaches this
        value: mIoU at or above it for smm, MAE at or below it for vdt.
    """

    seed: int
    task: str = 'smm'
    modality_count: int = 3
    modalities: tuple = None
    capsule_types: int = 8
    whole_types: int = None
    routing_iters: int = 3
    lambda_schedule: tuple = (1.0, 2.0, 3.0)
    channels: int = 64
    classes: int = 4
    in_channels: int = 3
    image_size: int = None
    n_scenes: int = 64
    share_params: bool = True
    fusion_mechanism: str = 'pwrf'
    sub_decoders: int = 2
    split_weighting: str = 'uniform'
    keep_fraction: float = 0.7
    min_kept: int = 16
    beta2: float = 0.3
    alpha_s: float = 0.5
    learning_rate: float = 1e-3
    lr_schedule: str = 'constant'
    lr_step_epochs: int = 80
    epochs: int = 200
    batch: int = 8
    repeats: int = 1
    output_dir: str = 'runs'
    target_metric: float = None

    def __post_init__(self):
        # JSON hands us lists
        if self.modalities is not None:
            object.__setattr__(self, 'modalities', tuple(self.modalities))
        object.__setattr__(self, 'lambda_schedule',
                           tuple(float(v) for v in self.lambda_schedule))

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f'unknown config fields: {", ".join(unknown)}')
        if values.get('seed') is None:
            raise ConfigError('seed is mandatory')
        return cls(**values).validate()

    @classmethod
    def from_json(cls, path):
        try:
            values = json.loads(pathlib.Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot read config {path}: {exc}') from exc
        if not isinstance(values, dict):
            raise ConfigError(f'config {path} must hold a JSON object')
        return cls.from_dict(values)

    def to_dict(self):
        values = dataclasses.asdict(self)
        values['lambda_schedule'] = list(self.lambda_schedule)
        if self.modalities is not None:
            values['modalities'] = list(self.modalities)
        return values

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError('seed must be an integer')
        if self.seed < 0:
            raise ConfigError('seed must be non-negative')
        if self.task not in TASKS:
            raise ConfigError(f'unknown task {self.task!r}')
        if self.modality_count not in (2, 3):
            raise ConfigError('modality_count must be 2 or 3, '
                              f'got {self.modality_count}')
        if self.modalities is not None:
            allowed = TASK_MODALITIES[self.task]
            if len(self.modalities) != self.modality_count:
                raise ConfigError('modalities must list exactly '
                                  f'{self.modality_count} names')
            if len(set(self.modalities)) != len(self.modalities) or \
                    not set(self.modalities) <= set(allowed):
                raise ConfigError(f'modalities must be distinct names from '
                                  f'{allowed}, got {self.modalities}')
        counts = {
            'capsule_types': self.capsule_types,
            'routing_iters': self.routing_iters,
            'channels': self.channels,
            'classes': self.classes,
            'in_channels': self.in_channels,
            'n_scenes': self.n_scenes,
            'epochs': self.epochs,
            'batch': self.batch,
            'repeats': self.repeats,
            'lr_step_epochs': self.lr_step_epochs,
        }
        if self.whole_types is not None:
            counts['whole_types'] = self.whole_types
        if self.image_size is not None:
            counts['image_size'] = self.image_size
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f'{name} must be a positive integer, '
                                  f'got {value!r}')
        if self.task == 'smm' and self.classes < 2:
            raise ConfigError('smm needs at least two classes')
        if len(self.lambda_schedule) < self.routing_iters:
            raise ConfigError('lambda_schedule needs one entry per routing '
                              'iteration')
        if not 0 < self.keep_fraction <= 1:
            raise ConfigError('keep_fraction must lie in (0, 1]')
        if self.min_kept < 0:
            raise ConfigError('min_kept must be non-negative')
        if self.beta2 <= 0:
            raise ConfigError('beta2 must be positive')
        if not 0 <= self.alpha_s <= 1:
            raise ConfigError('alpha_s must lie in [0, 1]')
        if self.learning_rate < 0:
            raise ConfigError('learning_rate must be non-negative')
        if self.fusion_mechanism not in FUSION_MECHANISMS:
            raise ConfigError(f'unknown fusion mechanism '
                              f'{self.fusion_mechanism!r}')
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f'unknown lr schedule {self.lr_schedule!r}')
        if self.split_weighting not in SPLIT_WEIGHTINGS:
            raise ConfigError(f'unknown split weighting '
                              f'{self.split_weighting!r}')
        if self.sub_decoders not in (1, 2):
            raise ConfigError('sub_decoders must be 1 or 2')
        if self.target_metric is not None and \
                not 0 <= self.target_metric <= 1:
            raise ConfigError('target_metric must lie in [0, 1]')
        if self.image_size is not None and self.image_size < self.min_image_size:
            raise ConfigError(f'{self.task} needs image_size >= '
                              f'{self.min_image_size}')
        return self

    @property
    def modality_names(self):
        if self.modalities is not None:
            return self.modalities
        return TASK_MODALITIES[self.task][:self.modality_count]

    @property
    def whole_type_count(self):
        if self.whole_types is not None:
            return self.whole_types
        return self.classes if self.task == 'smm' else 2

    @property
    def stage_count(self):
        return 2 if self.task == 'smm' else 3

    @property
    def min_image_size(self):
        return 2 ** self.stage_count

    @property
    def resolved_image_size(self):
        if self.image_size is not None:
            return self.image_size
        return 16 if self.task == 'smm' else 32

    @property
    def category_count(self):
        return self.classes if self.task == 'smm' else 2
