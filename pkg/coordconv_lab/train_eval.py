"""
Training and evaluation

Adam with bias correction and decoupled weight decay, a step learning-rate
schedule, the three supervised tasks on Not-so-Clevr, evaluation metrics,
run artifacts and hyperparameter sweeps.

Tasks:
    cls  coordinates -> one-hot pixel (softmax over 4096 logits), accuracy
    reg  one-hot map or painted image -> coordinates (MSE), pixel error
    ren  coordinates -> painted image (pixelwise sigmoid), IOU

Coordinates are normalized to [-1, 1] with t = 2p/63 - 1, channel 0 = x,
channel 1 = y. Pixel errors are reported back in pixels.

Example:
    config = TrainConfig.from_dict({'lr': 0.005, 'epochs': 20})
    result = train_task('cls', build('CC-CLS'), make_split('uniform'), config)
    result.summary['final_test_accuracy']
"""

import asyncio
import json
import logging
import numbers
import os
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from itertools import product
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from coordconv_lab import nn_ops, utils
from coordconv_lab.model_zoo import CANVAS, MODEL_NAMES, TASK_HEADS, Architecture, Network, build
from coordconv_lab.notsoclevr import NotSoClevr, Split, generate_dataset, make_split
from coordconv_lab.rng import STREAM_INIT, STREAM_SHUFFLE, Rng
from coordconv_lab.tensor import DTYPES, Graph, NonFiniteError, ShapeError, Tensor, no_grad

logger = logging.getLogger(__name__)

TASKS = ('cls', 'reg', 'ren')
LOSSES = ('softmax-xent', 'sigmoid-xent', 'mse')
TASK_LOSSES = {'cls': ('softmax-xent',), 'reg': ('mse',), 'ren': ('sigmoid-xent', 'mse')}
TASK_METRICS = {'cls': 'accuracy', 'reg': 'pixel_error', 'ren': 'iou'}
HIGHER_IS_BETTER = {'accuracy': True, 'iou': True, 'pixel_error': False}
LR_SCHEDULES = ('step', 'constant')
BATCH_SIZES = (16, 32)
REGRESSION_INPUTS = ('onehot', 'image')
MAX_EPOCHS = 1000
PIXEL_SCALE = (CANVAS - 1) / 2.0

METRIC_COLUMNS = ['epoch', 'split', 'loss', 'accuracy', 'iou', 'pixel_error']
FLOAT_FORMAT = '%.9g'


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient or parameter"""

    def __init__(self, message: str, config: Dict[str, Any]):
        super().__init__(message)
        self.config = config


class TrainConfig:
    """Validated training hyperparameters"""

    DEFAULTS = {
        'lr': 0.005,
        'lr_schedule': 'step',
        'milestones': [200, 400, 600, 800],
        'weight_decay': 0.0,
        'batch_size': 32,
        'epochs': MAX_EPOCHS,
        'seed': 0,
        'split_seed': 0,
        'loss': None,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'eval_every': 1,
        'eval_batch_size': 128,
        'early_stop_patience': 10,
        'perfect_pixel_error': 0.1,
        'train_limit': None,
        'test_limit': None,
        'regression_input': 'onehot',
        'dtype': 'float32',
    }
    FLOAT_OPTIONS = ('lr', 'weight_decay', 'beta1', 'beta2', 'eps', 'perfect_pixel_error')
    INT_OPTIONS = ('batch_size', 'epochs', 'seed', 'split_seed', 'eval_every', 'eval_batch_size',
                   'early_stop_patience', 'train_limit', 'test_limit')

    def __init__(self, **values):
        unknown = set(values) - set(self.DEFAULTS)
        if unknown:
            raise ValueError(f"Unknown training options {sorted(unknown)}; accepted: {sorted(self.DEFAULTS)}")
        merged = dict(self.DEFAULTS)
        merged.update(values)
        for key, value in self._coerce(merged).items():
            setattr(self, key, value)
        self.milestones = sorted(self.milestones)
        self.validate()

    @classmethod
    def _coerce(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        """Numeric options as float/int; anything non-numeric is a ValueError naming every bad key"""
        coerced, errors = dict(values), []

        def number(value, kind):
            if isinstance(value, bool) or not isinstance(value, (numbers.Real, str)):
                raise TypeError(value)
            if kind is float:
                return float(value)
            if isinstance(value, numbers.Integral):
                return int(value)
            real = float(value)
            if not real.is_integer():
                raise ValueError(value)
            return int(real)

        for key, value in values.items():
            if key == 'milestones':
                kind, expected = int, 'a list of integers'
            elif key in cls.FLOAT_OPTIONS:
                kind, expected = float, 'a number'
            elif key in cls.INT_OPTIONS:
                kind, expected = int, 'an integer'
            else:
                continue
            try:
                if key == 'milestones':
                    if isinstance(value, (str, bytes)) or not isinstance(value, (list, tuple)):
                        raise TypeError(value)
                    coerced[key] = [number(m, int) for m in value]
                elif value is not None:
                    coerced[key] = number(value, kind)
            except (TypeError, ValueError, OverflowError):
                errors.append(f"{key} must be {expected}, got {value!r}")
        if errors:
            raise ValueError('; '.join(errors))
        return coerced

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]]) -> 'TrainConfig':
        """Build from a config section or CLI overrides; None values fall back to defaults"""
        return cls(**{key: value for key, value in (values or {}).items() if value is not None})

    def validate(self):
        checks = [
            (self.lr > 0, f"lr must be > 0, got {self.lr}"),
            (self.lr_schedule in LR_SCHEDULES, f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}"),
            (all(m >= 0 for m in self.milestones), f"milestones must be >= 0, got {self.milestones}"),
            (self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}"),
            (self.batch_size in BATCH_SIZES, f"batch_size must be one of {BATCH_SIZES}, got {self.batch_size}"),
            (1 <= self.epochs <= MAX_EPOCHS, f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}"),
            (self.seed >= 0 and self.split_seed >= 0, f"seeds must be >= 0, got {self.seed}, {self.split_seed}"),
            (self.loss is None or self.loss in LOSSES, f"loss must be one of {LOSSES}, got {self.loss!r}"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, f"betas must be in [0, 1), got {self.beta1}, {self.beta2}"),
            (self.eps > 0, f"eps must be > 0, got {self.eps}"),
            (self.eval_every >= 1, f"eval_every must be >= 1, got {self.eval_every}"),
            (self.eval_batch_size >= 1, f"eval_batch_size must be >= 1, got {self.eval_batch_size}"),
            (self.early_stop_patience >= 0, f"early_stop_patience must be >= 0, got {self.early_stop_patience}"),
            (self.perfect_pixel_error >= 0, f"perfect_pixel_error must be >= 0, got {self.perfect_pixel_error}"),
            (self.train_limit is None or self.train_limit >= 1, f"train_limit must be >= 1, got {self.train_limit}"),
            (self.test_limit is None or self.test_limit >= 1, f"test_limit must be >= 1, got {self.test_limit}"),
            (self.regression_input in REGRESSION_INPUTS,
             f"regression_input must be one of {REGRESSION_INPUTS}, got {self.regression_input!r}"),
            (self.dtype in DTYPES, f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}"),
        ]
        errors = [message for ok, message in checks if not ok]
        if errors:
            raise ValueError('; '.join(errors))

    def to_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in self.DEFAULTS}

    def replace(self, **changes) -> 'TrainConfig':
        values = self.to_dict()
        values.update(changes)
        return TrainConfig(**values)

    def __repr__(self):
        return f"TrainConfig({self.to_dict()})"


class MetricsRecord(NamedTuple):
    epoch: int
    split: str
    loss: float
    accuracy: Optional[float] = None
    iou: Optional[float] = None
    pixel_error: Optional[float] = None
    wall_clock_s: Optional[float] = None


class TrainResult(NamedTuple):
    history: List[MetricsRecord]
    summary: Dict[str, Any]
    network: Network


# optimizer

class AdamState:
    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              config: TrainConfig, step_index: int, lr: Optional[float] = None) -> AdamState:
    """
    One Adam update with bias correction for step_index (1-based), then
    decoupled weight decay p <- p - lr*wd*p. Missing gradients count as zero.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.m)} optimizer slots")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** step_index
    correction2 = 1.0 - b2 ** step_index

    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        updated = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        if config.weight_decay:
            updated = updated - lr * config.weight_decay * updated
        p.data = updated.astype(p.dtype, copy=False)

    state.step = step_index
    return state


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if config.lr_schedule == 'constant':
        return config.lr
    drops = sum(1 for milestone in config.milestones if epoch >= milestone)
    return config.lr * 0.1 ** drops


# metrics

def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    logits = np.asarray(logits)
    if len(logits) == 0:
        return 0.0
    return float(np.mean(logits.argmax(axis=1) == np.asarray(targets)))


def iou(pred_prob: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    predicted = np.asarray(pred_prob) > threshold
    actual = np.asarray(target) > 0.5
    union = np.logical_or(predicted, actual).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, actual).sum() / union)


def mean_iou(pred_probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """Mean of per-example IOU over the leading axis"""
    n = len(pred_probs)
    if n == 0:
        return 0.0
    predicted = (np.asarray(pred_probs) > threshold).reshape(n, -1)
    actual = (np.asarray(targets) > 0.5).reshape(n, -1)
    union = np.logical_or(predicted, actual).sum(axis=1)
    inter = np.logical_and(predicted, actual).sum(axis=1)
    scores = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(scores.mean())


def pixel_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean distance in pixels between normalized coordinates"""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if len(diff) == 0:
        return 0.0
    return float(np.sqrt((diff * diff).sum(axis=1)).mean() * PIXEL_SCALE)


def normalize_coords(p) -> np.ndarray:
    return 2.0 * np.asarray(p, dtype=np.float64) / (CANVAS - 1) - 1.0


def denormalize_coords(t) -> np.ndarray:
    return (np.asarray(t, dtype=np.float64) + 1.0) * PIXEL_SCALE


def is_perfect(task: str, metric: float, config: TrainConfig) -> bool:
    if task == 'reg':
        return metric <= config.perfect_pixel_error
    return metric >= 1.0


# task data

class TaskData:
    """Inputs and targets of one task over a subset of the dataset, materialized per batch"""

    def __init__(self, task: str, input_mode: str, dataset: NotSoClevr, indices: np.ndarray,
                 regression_input: str = 'onehot', dtype=np.float32):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        self.task = task
        self.input_mode = input_mode
        self.indices = np.asarray(indices, dtype=np.int64)
        self.dtype = np.dtype(dtype)
        centers = dataset.centers[self.indices].astype(np.int64)
        self.coords = normalize_coords(centers).astype(self.dtype)
        if input_mode == 'image':
            self.maps = dataset.onehots[self.indices] if regression_input == 'onehot' else dataset.images[self.indices]
        if task == 'cls':
            self.targets = centers[:, 1] * CANVAS + centers[:, 0]
        elif task == 'reg':
            self.targets = self.coords
        else:
            self.targets = dataset.images[self.indices]

    def __len__(self):
        return len(self.indices)

    def inputs(self, positions: np.ndarray) -> Tensor:
        n = len(positions)
        if self.input_mode == 'coords-1x1':
            data = self.coords[positions].reshape(n, 1, 1, 2)
        elif self.input_mode == 'coords-tiled':
            data = np.broadcast_to(self.coords[positions][:, None, None, :], (n, CANVAS, CANVAS, 2)).copy()
        else:
            data = self.maps[positions][..., None].astype(self.dtype)
        return Tensor(data)

    def targets_for(self, positions: np.ndarray) -> np.ndarray:
        if self.task == 'ren':
            return self.targets[positions][..., None].astype(self.dtype)
        return self.targets[positions]

    def batch(self, positions: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        return self.inputs(positions), self.targets_for(positions)


def compute_loss(task: str, loss_name: str, out: Tensor, targets: np.ndarray) -> Tensor:
    if loss_name == 'softmax-xent':
        return nn_ops.softmax_xent(out, targets)
    if loss_name == 'sigmoid-xent':
        return nn_ops.sigmoid_xent_pixelwise(out, targets)
    if task == 'ren':
        return nn_ops.mse_loss(nn_ops.sigmoid(out), targets)
    return nn_ops.mse_loss(out, targets)


def task_metric(task: str, outputs: np.ndarray, targets: np.ndarray) -> float:
    if task == 'cls':
        return accuracy(outputs, targets)
    if task == 'reg':
        return pixel_error(outputs, targets)
    with no_grad():
        probs = nn_ops.sigmoid(Tensor(outputs)).data
    return mean_iou(probs, targets)


def predict(network: Network, data: TaskData, batch_size: int = 128) -> np.ndarray:
    """Raw network outputs over the whole subset, in eval mode"""
    chunks = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            positions = np.arange(start, min(start + batch_size, len(data)))
            chunks.append(network.forward(data.inputs(positions), training=False).data)
    return np.concatenate(chunks) if chunks else np.zeros((0,))


def evaluate(network: Network, data: TaskData, loss_name: str, batch_size: int = 128) -> Dict[str, float]:
    outputs = predict(network, data, batch_size)
    targets = data.targets_for(np.arange(len(data)))
    with no_grad():
        loss = compute_loss(data.task, loss_name, Tensor(outputs), targets).item()
    return {'loss': loss, TASK_METRICS[data.task]: task_metric(data.task, outputs, targets)}


def resolve_loss(task: str, config: TrainConfig) -> str:
    loss_name = config.loss or TASK_LOSSES[task][0]
    if loss_name not in TASK_LOSSES[task]:
        raise ValueError(f"loss {loss_name!r} does not apply to task {task}; accepted {TASK_LOSSES[task]}")
    return loss_name


@lru_cache(maxsize=1)
def default_dataset() -> NotSoClevr:
    return generate_dataset()


def _select(indices: np.ndarray, limit: Optional[int]) -> np.ndarray:
    return indices if limit is None else indices[:limit]


def train_task(task: str, arch: Architecture, split: Split, config: TrainConfig,
               dataset: Optional[NotSoClevr] = None, coord_path: str = 'split') -> TrainResult:
    """Train one architecture on one task and split; deterministic given config.seed"""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if TASK_HEADS[task] != arch.output_head:
        raise ValueError(f"{arch.name} has head {arch.output_head}; task {task} needs {TASK_HEADS[task]}")
    loss_name = resolve_loss(task, config)
    dataset = dataset if dataset is not None else default_dataset()
    dtype = DTYPES[config.dtype]
    metric = TASK_METRICS[task]

    train_data = TaskData(task, arch.input_mode, dataset, _select(split.train_indices, config.train_limit),
                          config.regression_input, dtype)
    test_data = TaskData(task, arch.input_mode, dataset, _select(split.test_indices, config.test_limit),
                         config.regression_input, dtype)

    network = Network(arch, Rng(config.seed, STREAM_INIT), dtype=dtype, coord_path=coord_path)
    params = network.parameters()
    state = AdamState(params)
    shuffle = Rng(config.seed, STREAM_SHUFFLE)

    history: List[MetricsRecord] = []
    evaluated: List[Tuple[int, Dict[str, float], Dict[str, float]]] = []
    perfect_since = None
    stopped_early = False
    step = 0
    started = time.perf_counter()
    last_epoch = config.epochs - 1

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = shuffle.derive(epoch).permutation(len(train_data))
        for start in range(0, len(order), config.batch_size):
            inputs, targets = train_data.batch(order[start:start + config.batch_size])
            network.zero_grad()
            try:
                with Graph() as graph:
                    loss = compute_loss(task, loss_name, network.forward(inputs, training=True), targets)
                    graph.backward(loss)
            except NonFiniteError as e:
                logger.error(f"Divergence in {arch.name} at epoch {epoch}, step {step}: {e}; config {config.to_dict()}")
                raise DivergenceError(f"{arch.name} diverged at epoch {epoch}, step {step}: {e}", config.to_dict()) from e
            step += 1
            adam_step(params, [p.grad for p in params], state, config, step, lr)
            if not all(np.isfinite(p.data).all() for p in params):
                logger.error(f"Non-finite parameters in {arch.name} at epoch {epoch}; config {config.to_dict()}")
                raise DivergenceError(f"{arch.name} produced non-finite parameters at epoch {epoch}", config.to_dict())

        if (epoch + 1) % config.eval_every and epoch != last_epoch:
            continue

        elapsed = time.perf_counter() - started
        try:
            train_metrics = evaluate(network, train_data, loss_name, config.eval_batch_size)
            test_metrics = evaluate(network, test_data, loss_name, config.eval_batch_size)
        except NonFiniteError as e:
            logger.error(f"Divergence in {arch.name} evaluating epoch {epoch}: {e}; config {config.to_dict()}")
            raise DivergenceError(f"{arch.name} diverged evaluating epoch {epoch}: {e}", config.to_dict()) from e
        for part, values in (('train', train_metrics), ('test', test_metrics)):
            history.append(MetricsRecord(epoch, part, values['loss'], wall_clock_s=elapsed,
                                         **{metric: values[metric]}))
        evaluated.append((epoch, train_metrics, test_metrics))
        logger.info(f"{arch.name} epoch {epoch} lr {lr:.3g} "
                    f"train loss {train_metrics['loss']:.5f} {metric} {train_metrics[metric]:.4f} | "
                    f"test loss {test_metrics['loss']:.5f} {metric} {test_metrics[metric]:.4f}")

        if is_perfect(task, train_metrics[metric], config):
            perfect_since = epoch if perfect_since is None else perfect_since
            if config.early_stop_patience and epoch - perfect_since + 1 >= config.early_stop_patience:
                logger.info(f"{arch.name}: train {metric} perfect since epoch {perfect_since}, stopping early")
                stopped_early = True
                break
        else:
            perfect_since = None

    summary = summarize_history(task, evaluated, epochs_run=epoch + 1, stopped_early=stopped_early)
    summary['params'] = arch.param_count()
    summary['wall_clock_s'] = time.perf_counter() - started
    return TrainResult(history, summary, network)


def summarize_history(task: str, evaluated, epochs_run: int, stopped_early: bool) -> Dict[str, Any]:
    """Best-epoch (by test metric, earliest on ties) and final-epoch metrics"""
    metric = TASK_METRICS[task]
    sign = 1.0 if HIGHER_IS_BETTER[metric] else -1.0
    best_index = 0
    for i, (_, _, test) in enumerate(evaluated):
        if sign * test[metric] > sign * evaluated[best_index][2][metric]:
            best_index = i
    best_epoch, best_train, best_test = evaluated[best_index]
    final_epoch, final_train, final_test = evaluated[-1]
    return {
        'metric': metric,
        'best_epoch': best_epoch,
        f'best_train_{metric}': best_train[metric],
        f'best_test_{metric}': best_test[metric],
        'final_epoch': final_epoch,
        'final_train_loss': final_train['loss'],
        'final_test_loss': final_test['loss'],
        f'final_train_{metric}': final_train[metric],
        f'final_test_{metric}': final_test[metric],
        'epochs_run': epochs_run,
        'stopped_early': stopped_early,
    }


# artifacts

def metrics_frame(history: Sequence[MetricsRecord], include_timing: bool = True) -> pd.DataFrame:
    columns = METRIC_COLUMNS + (['wall_clock_s'] if include_timing else [])
    return pd.DataFrame([record._asdict() for record in history], columns=list(MetricsRecord._fields))[columns]


def write_metrics_csv(path: str, history: Sequence[MetricsRecord], include_timing: bool = True):
    """Long format, one row per evaluated epoch and split; metrics a task lacks stay empty"""
    utils.create_data_directory(path)
    metrics_frame(history, include_timing).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_metrics_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Metrics file not found: {path}")
    return pd.read_csv(path)


def run_training(task: str, model: str, split_kind: str, config: TrainConfig, out_dir: str,
                 hyper: Optional[Dict[str, Any]] = None, with_r: bool = False,
                 include_timing: bool = True, argv: Optional[List[str]] = None,
                 dataset: Optional[NotSoClevr] = None) -> Dict[str, Any]:
    """Train and write metrics.csv, checkpoint.tnsr and manifest.json into out_dir"""
    arch = build(model, hyper, with_r=with_r)
    split = make_split(split_kind, config.split_seed)
    dataset = dataset if dataset is not None else default_dataset()
    result = train_task(task, arch, split, config, dataset)

    os.makedirs(out_dir, exist_ok=True)
    artifacts = {'metrics': 'metrics.csv', 'checkpoint': 'checkpoint.tnsr', 'manifest': 'manifest.json'}
    write_metrics_csv(os.path.join(out_dir, artifacts['metrics']), result.history, include_timing)
    result.network.save(os.path.join(out_dir, artifacts['checkpoint']))

    manifest = {
        'argv': list(argv or []),
        'created': utils.get_current_timestamp(),
        'task': task,
        'model': model,
        'hyper': arch.hyper,
        'with_r': with_r,
        'split': {'kind': split.kind, 'seed': split.seed},
        'config': config.to_dict(),
        'seed': config.seed,
        'dataset_hash': dataset.content_hash(),
        'architecture': arch.to_text(),
        'params': arch.param_count(),
        'summary': result.summary,
        'artifacts': artifacts,
    }
    with open(os.path.join(out_dir, artifacts['manifest']), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, default=_json_default)
    logger.info(f"Run written to {out_dir}")
    return manifest


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def load_manifest(run_dir: str) -> Dict[str, Any]:
    path = os.path.join(run_dir, 'manifest.json')
    if not os.path.exists(path):
        raise FileNotFoundError(f"Run manifest not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


# sweeps

GRID_KEYS = ('lr', 'weight_decay', 'batch_size', 'fs', 'c_mult', 'models', 'splits', 'seeds', 'epochs')
FAMILIES = ('CC', 'DECONV', 'CONV', 'all')
RESULT_COLUMNS = ['rank', 'index', 'task', 'model', 'family', 'split', 'seed', 'fs', 'c_mult', 'lr',
                  'weight_decay', 'batch_size', 'epochs', 'params', 'status', 'error', 'best_epoch',
                  'final_train_metric', 'final_test_metric', 'best_test_metric', 'epochs_run', 'wall_clock_s']


def parse_grid(grid: Any) -> Dict[str, List[Any]]:
    """Validate a sweep grid: a JSON object mapping known keys to a value or a list of values"""
    if not isinstance(grid, dict):
        raise ValueError(f"Malformed grid: expected a JSON object, got {type(grid).__name__}")
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"Malformed grid: unknown keys {sorted(unknown)}; accepted {list(GRID_KEYS)}")
    parsed = {}
    for key, values in grid.items():
        values = values if isinstance(values, list) else [values]
        for value in values:
            if isinstance(value, (dict, list)):
                raise ValueError(f"Malformed grid: {key} entries must be scalars, got {value!r}")
        parsed[key] = values
    return parsed


def load_grid(path: str) -> Dict[str, List[Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            grid = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"Grid file not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"Malformed grid file {path}: {str(e)}")
    return parse_grid(grid)


def family_models(task: str, family: str) -> List[str]:
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    models = [name for name in MODEL_NAMES if build(name).task == task]
    if family == 'all':
        return models
    return [name for name in models if name.split('-')[0] == family]


def expand_grid(task: str, family: str, grid: Dict[str, List[Any]], base: TrainConfig) -> List[Dict[str, Any]]:
    """Grid points in product order; filter size and channel multiplier only vary deconv models"""
    grid = parse_grid(grid)
    models = family_models(task, family)
    if 'models' in grid:
        outside = [name for name in grid['models'] if name not in models]
        if outside:
            raise ValueError(f"Grid models {outside} are not {family} models for task {task}")
        models = list(grid['models'])

    axes = {
        'model': models,
        'split': grid.get('splits', ['uniform']),
        'seed': grid.get('seeds', [base.seed]),
        'lr': grid.get('lr', [base.lr]),
        'weight_decay': grid.get('weight_decay', [base.weight_decay]),
        'batch_size': grid.get('batch_size', [base.batch_size]),
        'epochs': grid.get('epochs', [base.epochs]),
        'fs': grid.get('fs', [None]),
        'c_mult': grid.get('c_mult', [None]),
    }
    points, seen = [], set()
    for values in product(*axes.values()):
        point = dict(zip(axes, values))
        if not point['model'].startswith('DECONV-'):
            point['fs'] = point['c_mult'] = None
        key = tuple(point.values())
        if key in seen:
            continue
        seen.add(key)
        point.update(index=len(points), task=task, base=base.to_dict())
        points.append(point)
    return points


def run_sweep_point(point: Dict[str, Any]) -> Dict[str, Any]:
    """Train one grid point; failures become status rows instead of exceptions"""
    row = {key: point.get(key) for key in ('index', 'task', 'model', 'split', 'seed', 'fs', 'c_mult', 'lr',
                                           'weight_decay', 'batch_size', 'epochs')}
    row['family'] = point['model'].split('-')[0]
    started = time.perf_counter()
    try:
        hyper = {'fs': point['fs'], 'c_mult': point['c_mult']}
        arch = build(point['model'], hyper)
        row['params'] = arch.param_count()
        overrides = {key: point[key] for key in ('seed', 'lr', 'weight_decay', 'batch_size', 'epochs')}
        config = TrainConfig(**dict(point['base'], **overrides))
        split = make_split(point['split'], config.split_seed)
        summary = train_task(point['task'], arch, split, config).summary
        metric = summary['metric']
        row.update(
            status='success',
            error='',
            best_epoch=summary['best_epoch'],
            final_train_metric=summary[f'final_train_{metric}'],
            final_test_metric=summary[f'final_test_{metric}'],
            best_test_metric=summary[f'best_test_{metric}'],
            epochs_run=summary['epochs_run'],
        )
    except Exception as e:
        logger.error(f"Sweep point {point.get('index')} ({point.get('model')}) failed: {utils.format_error_message(e)}")
        row.update(status='error', error=utils.format_error_message(e))
    row['wall_clock_s'] = time.perf_counter() - started
    return row


def rank_results(rows: Sequence[Dict[str, Any]], task: str, include_timing: bool = True) -> pd.DataFrame:
    """Stable ranking by final test metric (grid order breaks ties); failed runs last"""
    frame = pd.DataFrame(list(rows), columns=[c for c in RESULT_COLUMNS if c != 'rank'])
    ascending = not HIGHER_IS_BETTER[TASK_METRICS[task]]
    frame['_failed'] = frame['status'] != 'success'
    frame = frame.sort_values(['_failed', 'final_test_metric'], ascending=[True, ascending],
                              kind='mergesort', na_position='last')
    frame = frame.drop(columns='_failed').reset_index(drop=True)
    frame.insert(0, 'rank', np.arange(1, len(frame) + 1))
    if not include_timing:
        frame = frame.drop(columns='wall_clock_s')
    return frame


def summarize_sweep(results: pd.DataFrame) -> pd.DataFrame:
    """Best successful run per family, in rank order"""
    succeeded = results[results['status'] == 'success']
    return succeeded.groupby('family', sort=False).head(1).reset_index(drop=True)


async def sweep_async(task: str, family: str, grid: Dict[str, List[Any]], base: TrainConfig,
                      jobs: int = 1, include_timing: bool = True) -> pd.DataFrame:
    """One train_task per grid point, at most `jobs` at a time in worker processes"""
    points = expand_grid(task, family, grid, base)
    logger.info(f"Sweeping {len(points)} runs for task {task}, family {family}, jobs {jobs}")
    semaphore = asyncio.Semaphore(max(jobs, 1))
    loop = asyncio.get_running_loop()
    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 and points else None

    async def run_one(point):
        async with semaphore:
            logger.info(f"Dispatching run {point['index']}: {point['model']} {point['split']} "
                        f"seed {point['seed']} lr {point['lr']}")
            if executor is None:
                row = run_sweep_point(point)
            else:
                row = await loop.run_in_executor(executor, run_sweep_point, point)
            logger.info(f"Finished run {point['index']}: {row['status']}")
            return row

    try:
        rows = await asyncio.gather(*(run_one(point) for point in points))
    finally:
        if executor is not None:
            executor.shutdown()
    return rank_results(rows, task, include_timing)


def sweep(task: str, family: str, grid: Dict[str, List[Any]], base: TrainConfig,
          jobs: int = 1, include_timing: bool = True) -> pd.DataFrame:
    return asyncio.run(sweep_async(task, family, grid, base, jobs, include_timing))


def write_results_csv(path: str, frame: pd.DataFrame):
    utils.create_data_directory(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
