"""
Self-checks

Randomized gradient checks for every network operation, the conv /
transposed-conv adjoint identity, CoordConv degeneracy and parameter
formula checks, the dataset painting oracle, and a short deterministic
CC-CLS run whose metrics CSV is byte-identical across invocations with the
same seed.

Each check reports {'check', 'status' ('success' | 'error'), 'detail'};
a check that raises is recorded as an error instead of aborting the run.

Example:
    results = SelfTest({'seed': 0, 'trials': 10}).run('selftest_out')
"""

import logging
import os
import time
from typing import Any, Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from coordconv_lab import nn_ops, utils
from coordconv_lab.model_zoo import EXPECTED_PARAMS, PARAM_BANDS, build
from coordconv_lab.nn_ops import BatchNormState, ConvSpec, CoordSpec
from coordconv_lab.notsoclevr import N_EXAMPLES, generate_dataset, make_split, paint_oracle
from coordconv_lab.rng import STREAM_CHECKS, Rng
from coordconv_lab.tensor import Tensor, finite_diff_check
from coordconv_lab.train_eval import TrainConfig, train_task, write_metrics_csv

GRADIENT_TOLERANCE = 1e-6
GRADIENT_FLOOR = 1e-8
ADJOINT_TOLERANCE = 1e-5

GradientCase = Tuple[str, Callable[..., Tensor], List[Tensor]]


def _array(rng: Rng, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    return rng.uniform(shape, lo, hi, dtype=np.float64)


def _param(rng: Rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(_array(rng, shape, lo, hi), requires_grad=True)


def _away_from_zero(rng: Rng, shape, lo=0.1, hi=1.0) -> np.ndarray:
    signs = np.where(rng.uniform(shape, 0.0, 1.0) < 0.5, -1.0, 1.0)
    return signs * rng.uniform(shape, lo, hi)


def _projected(op: Callable[..., Tensor], rng: Rng, out_shape) -> Callable[..., Tensor]:
    """Scalarize op by a fixed random projection of its output"""
    # |weights| >= 0.5 keeps every analytic gradient element well above the rounding noise of f
    projection = Tensor(_away_from_zero(rng, out_shape, 0.5, 1.5))

    def f(*tensors):
        return (op(*tensors) * projection).sum()

    return f


def _random_conv_spec(rng: Rng, h: int, w: int, c_in: int) -> ConvSpec:
    padding = 'valid' if rng.uniform(1, 0.0, 1.0)[0] < 0.3 else 'same'
    k = int(rng.integers(1, min(3, h, w) + 1))
    stride = int(rng.integers(1, 3))
    return ConvSpec(k=k, c_in=c_in, c_out=int(rng.integers(1, 5)), stride=stride, padding=padding)


def _conv_shape(x_shape, spec: ConvSpec):
    n, h, w, _ = x_shape
    oh = nn_ops.conv_output_extent(h, spec.k, spec.stride, spec.padding)[0]
    ow = nn_ops.conv_output_extent(w, spec.k, spec.stride, spec.padding)[0]
    return (n, oh, ow, spec.c_out)


def gradient_cases(rng: Rng) -> List[GradientCase]:
    """One randomized small-shape, double-precision case per operation"""
    n = int(rng.integers(1, 3))
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    c = int(rng.integers(1, 5))
    x_shape = (n, h, w, c)
    cases: List[GradientCase] = []

    coord_spec = CoordSpec(with_r=bool(rng.integers(0, 2)))
    cases.append(('add_coords', _projected(lambda x: nn_ops.add_coords(x, coord_spec), rng, (n, h, w, c + coord_spec.d)),
                  [_param(rng, x_shape)]))

    spec = _random_conv_spec(rng, h, w, c)
    cases.append(('conv2d', _projected(lambda x, wt, b: nn_ops.conv2d(x, spec, wt, b), rng, _conv_shape(x_shape, spec)),
                  [_param(rng, x_shape), _param(rng, (spec.k, spec.k, c, spec.c_out)), _param(rng, (spec.c_out,))]))

    for path in nn_ops.COORD_PATHS:
        cspec = _random_conv_spec(rng, h, w, c)
        weight_shape = (cspec.k, cspec.k, c + coord_spec.d, cspec.c_out)
        cases.append((f'coord_conv[{path}]',
                      _projected(lambda x, wt, b, cspec=cspec, path=path:
                                 nn_ops.coord_conv(x, cspec, coord_spec, wt, b, path=path), rng, _conv_shape(x_shape, cspec)),
                      [_param(rng, x_shape), _param(rng, weight_shape), _param(rng, (cspec.c_out,))]))

    tspec = _random_conv_spec(rng, h, w, c)
    oh = nn_ops.transpose_output_extent(h, tspec.k, tspec.stride, tspec.padding)[0]
    ow = nn_ops.transpose_output_extent(w, tspec.k, tspec.stride, tspec.padding)[0]
    cases.append(('conv2d_transpose',
                  _projected(lambda x, wt, b: nn_ops.conv2d_transpose(x, tspec, wt, b), rng, (n, oh, ow, tspec.c_out)),
                  [_param(rng, x_shape), _param(rng, (tspec.k, tspec.k, tspec.c_out, c)), _param(rng, (tspec.c_out,))]))

    ph, pw = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
    pool_shape = (n, ph, pw, c)
    # distinct values spaced far beyond the difference step, so no window has a tie
    spaced = rng.permutation(int(np.prod(pool_shape))).reshape(pool_shape) * 0.1
    cases.append(('max_pool2', _projected(nn_ops.max_pool2, rng, (n, ph // 2, pw // 2, c)),
                  [Tensor(spaced.astype(np.float64), requires_grad=True)]))

    cases.append(('global_avg_pool', _projected(nn_ops.global_avg_pool, rng, (n, c)), [_param(rng, x_shape)]))

    f, u = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    cases.append(('dense', _projected(nn_ops.dense, rng, (n, u)),
                  [_param(rng, (n, f)), _param(rng, (f, u)), _param(rng, (u,))]))

    cases.append(('relu', _projected(nn_ops.relu, rng, x_shape),
                  [Tensor(_away_from_zero(rng, x_shape), requires_grad=True)]))
    # 0.1 <= |x| <= 2: off the inflection point and short of saturation
    cases.append(('tanh_act', _projected(nn_ops.tanh_act, rng, x_shape),
                  [Tensor(_away_from_zero(rng, x_shape, 0.1, 2.0), requires_grad=True)]))
    cases.append(('sigmoid', _projected(nn_ops.sigmoid, rng, x_shape),
                  [Tensor(_away_from_zero(rng, x_shape, 0.1, 2.0), requires_grad=True)]))

    bn_shape = (int(rng.integers(2, 4)), h, w, c)
    for training in (True, False):
        state = BatchNormState(c, dtype=np.float64)
        state.gamma.data = _array(rng, c, 0.5, 1.5)
        state.beta.data = _array(rng, c)
        state.running_mean = _array(rng, c)
        state.running_var = _array(rng, c, 0.5, 1.5)
        # batch_norm reads gamma/beta from the state; the same tensors are checked
        cases.append((f'batch_norm[{"train" if training else "eval"}]',
                      _projected(lambda x, g, b, state=state, training=training: nn_ops.batch_norm(x, state, training),
                                 rng, bn_shape),
                      [_param(rng, bn_shape, -2, 2), state.gamma, state.beta]))

    classes = int(rng.integers(2, 9))
    targets = rng.integers(0, classes, size=n)
    cases.append(('softmax_xent', lambda z: nn_ops.softmax_xent(z, targets), [_param(rng, (n, classes), -3, 3)]))

    binary = (rng.uniform(x_shape, 0.0, 1.0) < 0.5).astype(np.float64)
    cases.append(('sigmoid_xent_pixelwise', lambda z: nn_ops.sigmoid_xent_pixelwise(z, binary),
                  [_param(rng, x_shape, -3, 3)]))

    target = _array(rng, (n, 2))
    cases.append(('mse_loss', lambda p: nn_ops.mse_loss(p, target), [_param(rng, (n, 2))]))
    return cases


def adjoint_extent(spec: ConvSpec, steps: int) -> int:
    """An input extent whose transposed-conv extent round-trips exactly"""
    if spec.padding == 'same':
        return spec.stride * steps
    return spec.k + spec.stride * (steps - 1)


def adjoint_gap(rng: Rng) -> float:
    """Relative gap between <conv2d(y), x> and <y, conv2d_transpose(x)> on random tensors"""
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    spec = _random_conv_spec(rng, 3, 3, c)._replace(bias=False)
    h = adjoint_extent(spec, int(rng.integers(1, 5)))
    w = adjoint_extent(spec, int(rng.integers(1, 5)))
    weights = Tensor(_array(rng, (spec.k, spec.k, spec.c_in, spec.c_out)))
    y = Tensor(_array(rng, (n, h, w, c)))
    forward = nn_ops.conv2d(y, spec, weights)
    x = Tensor(_array(rng, forward.shape))
    adjoint = nn_ops.conv2d_transpose(x, spec._replace(c_in=spec.c_out, c_out=spec.c_in), weights)
    lhs = float((forward.data * x.data).sum())
    rhs = float((y.data * adjoint.data).sum())
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)


def degenerate_coord_conv_matches(rng: Rng, batch: int) -> bool:
    """coord_conv with zeroed coordinate weights equals conv2d on the data channels, bit for bit"""
    h, w, c = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 5))
    spec = _random_conv_spec(rng, h, w, c)
    coord_spec = CoordSpec(with_r=bool(rng.integers(0, 2)))
    weights = rng.uniform((spec.k, spec.k, c + coord_spec.d, spec.c_out), -1, 1, dtype=np.float32)
    weights[:, :, c:, :] = 0.0
    bias = Tensor(rng.uniform(spec.c_out, -1, 1, dtype=np.float32))
    x = Tensor(rng.uniform((batch, h, w, c), -1, 1, dtype=np.float32))
    fused = nn_ops.coord_conv(x, spec, coord_spec, Tensor(weights), bias)
    plain = nn_ops.conv2d(x, spec, Tensor(weights[:, :, :c, :]), bias)
    return np.array_equal(fused.data, plain.data)


class SelfTest:
    """Runs every check and writes selftest_checks.csv and selftest_metrics.csv"""

    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.seed = config.get('seed', 0)
        self.trials = config.get('trials', 100)
        self.adjoint_trials = config.get('adjoint_trials', 50)
        self.degeneracy_inputs = config.get('degeneracy_inputs', 1000)
        self.formula_cases = config.get('formula_cases', 200)
        self.train = config.get('train', {'lr': 0.005, 'epochs': 3, 'batch_size': 32, 'train_limit': 256,
                                          'test_limit': 128, 'early_stop_patience': 0})
        self.logger = logging.getLogger(__name__)

    def _rng(self, index: int) -> Rng:
        return Rng(self.seed, STREAM_CHECKS).derive(index)

    def check(self, name: str, fn: Callable[[], str]) -> Dict[str, Any]:
        """Run one check; fn returns a detail string or raises AssertionError"""
        started = time.perf_counter()
        try:
            detail = fn()
            self.logger.info(f"check {name}: ok ({detail})")
            result = {'check': name, 'status': 'success', 'detail': detail}
        except Exception as e:
            self.logger.error(f"check {name} failed: {utils.format_error_message(e)}")
            result = {'check': name, 'status': 'error', 'detail': utils.format_error_message(e)}
        self.logger.debug(f"check {name} took {time.perf_counter() - started:.2f}s")
        return result

    def gradients(self) -> List[Dict[str, Any]]:
        worst: Dict[str, float] = {}
        rng = self._rng(0)
        for _ in range(self.trials):
            for name, fn, tensors in gradient_cases(rng):
                error = finite_diff_check(fn, tensors, floor=GRADIENT_FLOOR)
                worst[name] = max(worst.get(name, 0.0), error)

        def verdict(name):
            def run():
                if worst[name] >= GRADIENT_TOLERANCE:
                    raise AssertionError(f"max relative error {worst[name]:.3g} >= {GRADIENT_TOLERANCE}")
                return f"max relative error {worst[name]:.3g} over {self.trials} trials"
            return run

        return [self.check(f"gradient:{name}", verdict(name)) for name in worst]

    def adjoint(self) -> str:
        rng = self._rng(1)
        worst = max((adjoint_gap(rng) for _ in range(self.adjoint_trials)), default=0.0)
        if worst >= ADJOINT_TOLERANCE:
            raise AssertionError(f"adjoint gap {worst:.3g} >= {ADJOINT_TOLERANCE}")
        return f"max relative gap {worst:.3g} over {self.adjoint_trials} trials"

    def degeneracy(self) -> str:
        rng = self._rng(2)
        remaining, mismatches = self.degeneracy_inputs, 0
        while remaining > 0:
            batch = min(remaining, 50)
            mismatches += not degenerate_coord_conv_matches(rng, batch)
            remaining -= batch
        if mismatches:
            raise AssertionError(f"{mismatches} batches differ from conv2d")
        return f"{self.degeneracy_inputs} inputs bit-identical"

    def param_formula(self) -> str:
        rng = self._rng(3)
        for _ in range(self.formula_cases):
            c, c_out, k = int(rng.integers(1, 65)), int(rng.integers(1, 65)), int(rng.integers(1, 8))
            with_r = bool(rng.integers(0, 2))
            d = CoordSpec(with_r=with_r).d
            counted = nn_ops.layer_param_count('coordconv', c, c_out, k, d)
            expected = (c + d) * c_out * k * k + c_out
            if counted != expected:
                raise AssertionError(f"(c={c}, d={d}, c'={c_out}, k={k}): {counted} != {expected}")
        counts = {name: build(name).param_count() for name in EXPECTED_PARAMS}
        wrong = {name: count for name, count in counts.items() if count != EXPECTED_PARAMS[name]}
        if wrong:
            raise AssertionError(f"architecture counts off: {wrong}")
        low, high = PARAM_BANDS['DECONV-CLS']
        for fs in (2, 3, 4):
            for c_mult in (1, 2, 3):
                count = build('DECONV-CLS', {'fs': fs, 'c_mult': c_mult}).param_count()
                if not low <= count <= high:
                    raise AssertionError(f"DECONV-CLS fs={fs} c={c_mult}: {count} outside [{low}, {high}]")
        return f"{self.formula_cases} random layers and {len(counts)} architectures exact"

    def dataset(self) -> str:
        dataset = generate_dataset()
        if len(dataset) != N_EXAMPLES:
            raise AssertionError(f"{len(dataset)} examples")
        if not np.array_equal(paint_oracle(dataset.onehots), dataset.images):
            raise AssertionError("painted images differ from the convolution oracle")
        sizes = {kind: (len(s.train_indices), len(s.test_indices))
                 for kind, s in (('uniform', make_split('uniform', self.seed)), ('quadrant', make_split('quadrant')))}
        if sizes != {'uniform': (2509, 627), 'quadrant': (2352, 784)}:
            raise AssertionError(f"split sizes {sizes}")
        return f"{len(dataset)} examples match the oracle; splits {sizes}"

    def short_run(self, metrics_path: str) -> str:
        config = TrainConfig.from_dict(dict(self.train, seed=self.seed))
        result = train_task('cls', build('CC-CLS'), make_split('uniform', config.split_seed), config)
        write_metrics_csv(metrics_path, result.history, include_timing=False)
        return f"final test accuracy {result.summary['final_test_accuracy']:.4f} after {result.summary['epochs_run']} epochs"

    def run(self, out_dir: str) -> List[Dict[str, Any]]:
        os.makedirs(out_dir, exist_ok=True)
        results = self.check_all(os.path.join(out_dir, 'selftest_metrics.csv'))
        pd.DataFrame(results, columns=['check', 'status', 'detail']).to_csv(
            os.path.join(out_dir, 'selftest_checks.csv'), index=False)
        return results

    def check_all(self, metrics_path: str) -> List[Dict[str, Any]]:
        results = []
        try:
            results.extend(self.gradients())
        except Exception as e:
            results.append({'check': 'gradient', 'status': 'error', 'detail': utils.format_error_message(e)})
        results.append(self.check('adjoint', self.adjoint))
        results.append(self.check('coordconv_degeneracy', self.degeneracy))
        results.append(self.check('param_count', self.param_formula))
        results.append(self.check('dataset_oracle', self.dataset))
        results.append(self.check('short_run', lambda: self.short_run(metrics_path)))
        return results


def passed(results: List[Dict[str, Any]]) -> bool:
    return all(result['status'] == 'success' for result in results)
