"""
Run reports

Reads completed run directories (manifest.json, metrics.csv,
checkpoint.tnsr) and writes:

- a comparison table (report.csv, report.txt) with the final and best
  metrics of every run
- per split, normalized PGM sums of the predictions and of the ground
  truth (classification: softmax mass; rendering: sigmoid mass;
  regression: histogram of the rounded predicted pixels)
- for the first few test examples, the full logit map and a zoomed pixel
  window around the example's center (default 5 rows x 9 columns)
"""

import logging
import os
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from coordconv_lab import utils
from coordconv_lab.model_zoo import CANVAS, Network, build
from coordconv_lab.notsoclevr import make_split
from coordconv_lab.rng import STREAM_INIT, Rng
from coordconv_lab.tensor import DTYPES
from coordconv_lab.train_eval import (FLOAT_FORMAT, TASK_METRICS, TaskData, TrainConfig, default_dataset,
                                      denormalize_coords, load_manifest, predict, read_metrics_csv)

logger = logging.getLogger(__name__)

ZOOM_SCALE = 8


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _logistic(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def prediction_sum(task: str, outputs: np.ndarray) -> np.ndarray:
    """64x64 map of predicted mass summed over examples"""
    if task == 'cls':
        return _softmax(outputs.astype(np.float64)).sum(axis=0).reshape(CANVAS, CANVAS)
    if task == 'ren':
        return _logistic(outputs.astype(np.float64)).sum(axis=0)[..., 0]
    pixels = np.clip(np.rint(denormalize_coords(outputs)), 0, CANVAS - 1).astype(np.int64)
    hist = np.zeros((CANVAS, CANVAS))
    np.add.at(hist, (pixels[:, 1], pixels[:, 0]), 1.0)
    return hist


def truth_sum(data: TaskData, dataset) -> np.ndarray:
    maps = dataset.images if data.task == 'ren' else dataset.onehots
    return maps[data.indices].sum(axis=0, dtype=np.int64)


def zoom_window(values: np.ndarray, x: int, y: int, rows: int = 5, cols: int = 9) -> np.ndarray:
    """rows x cols section centered on (x, y), zero outside the canvas"""
    padded = np.pad(values, ((rows, rows), (cols, cols)))
    top, left = y - rows // 2 + rows, x - cols // 2 + cols
    return padded[top:top + rows, left:left + cols]


def restore_network(run_dir: str, manifest: Dict[str, Any]) -> Network:
    hyper = {key: value for key, value in manifest.get('hyper', {}).items() if key != 'with_r'}
    arch = build(manifest['model'], hyper, with_r=manifest.get('with_r', False))
    dtype = DTYPES[manifest['config'].get('dtype', 'float32')]
    network = Network(arch, Rng(manifest['seed'], STREAM_INIT), dtype=dtype)
    network.load(os.path.join(run_dir, manifest['artifacts']['checkpoint']))
    return network


class RunReport:
    """Report over a list of run directories"""

    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.window = tuple(config.get('window', (5, 9)))
        self.examples = config.get('examples', 3)
        self.scale = config.get('scale', 4)
        self.logger = logging.getLogger(__name__)

    def run_row(self, run_dir: str, out_dir: str) -> Dict[str, Any]:
        manifest = load_manifest(run_dir)
        metrics = read_metrics_csv(os.path.join(run_dir, manifest['artifacts']['metrics']))
        task = manifest['task']
        metric = TASK_METRICS[task]
        name = os.path.basename(os.path.normpath(run_dir))

        dataset = default_dataset()
        if dataset.content_hash() != manifest.get('dataset_hash'):
            self.logger.warning(f"{name}: dataset hash differs from the one recorded in the manifest")
        config = TrainConfig.from_dict(manifest['config'])
        split = make_split(manifest['split']['kind'], manifest['split']['seed'])
        network = restore_network(run_dir, manifest)

        images = []
        for part, indices, limit in (('train', split.train_indices, config.train_limit),
                                     ('test', split.test_indices, config.test_limit)):
            data = TaskData(task, network.arch.input_mode, dataset, indices if limit is None else indices[:limit],
                            config.regression_input, network.dtype)
            outputs = predict(network, data, config.eval_batch_size)
            for kind, values in (('prediction', prediction_sum(task, outputs)), ('truth', truth_sum(data, dataset))):
                path = os.path.join(out_dir, f"{name}_{part}_{kind}_sum.pgm")
                utils.write_pgm(path, utils.normalize_map(values), scale=self.scale)
                images.append(path)
            if part == 'test' and task != 'reg':
                images.extend(self.write_example_maps(name, out_dir, dataset, data, outputs))

        final = metrics[metrics['epoch'] == metrics['epoch'].max()].set_index('split')
        summary = manifest.get('summary', {})
        return {
            'run': name,
            'task': task,
            'model': manifest['model'],
            'split': manifest['split']['kind'],
            'seed': manifest['seed'],
            'params': manifest.get('params'),
            'metric': metric,
            'final_epoch': int(metrics['epoch'].max()),
            'final_train': float(final.loc['train', metric]),
            'final_test': float(final.loc['test', metric]),
            'best_epoch': summary.get('best_epoch'),
            'best_test': summary.get(f'best_test_{metric}'),
            'images': len(images),
        }

    def write_example_maps(self, name: str, out_dir: str, dataset, data: TaskData, outputs: np.ndarray) -> List[str]:
        rows, cols = self.window
        paths = []
        for position in range(min(self.examples, len(data))):
            index = int(data.indices[position])
            x, y = (int(v) for v in dataset.centers[index])
            logits = outputs[position].reshape(CANVAS, CANVAS).astype(np.float64)
            full = os.path.join(out_dir, f"{name}_example{index}_logits.pgm")
            zoom = os.path.join(out_dir, f"{name}_example{index}_zoom.pgm")
            utils.write_pgm(full, utils.normalize_map(logits), scale=self.scale)
            utils.write_pgm(zoom, utils.normalize_map(zoom_window(logits, x, y, rows, cols)), scale=ZOOM_SCALE)
            paths.extend([full, zoom])
        return paths

    def run(self, run_dirs: Sequence[str], out_dir: str) -> pd.DataFrame:
        if not run_dirs:
            raise ValueError("report needs at least one run directory")
        os.makedirs(out_dir, exist_ok=True)
        rows = []
        for run_dir in run_dirs:
            self.logger.info(f"Reporting {run_dir}")
            rows.append(self.run_row(run_dir, out_dir))
        table = pd.DataFrame(rows)
        table.to_csv(os.path.join(out_dir, 'report.csv'), index=False, float_format=FLOAT_FORMAT)
        with open(os.path.join(out_dir, 'report.txt'), 'w', encoding='utf-8') as f:
            f.write(table.to_string(index=False) + '\n')
        return table
