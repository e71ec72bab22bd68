"""
Model zoo

Declarative builders for the seven experiment architectures. An
Architecture is an immutable description (input mode, ordered LayerSpec
list, output head); Network instantiates one with initialized parameters
and runs it forward.

    arch = build('CC-CLS')
    arch.to_text()        # 'CoordConv 1x1,32 - 1x1,32 - 1x1,64 - 1x1,64 - 1x1,1'
    param_count(arch)     # 7553
    net = Network(arch, Rng(0, STREAM_INIT))

Hidden conv/deconv/coordconv/dense layers are followed by ReLU; the last
parametric layer is linear. Batch norm follows the activation of the layer
before it.
"""

import logging
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from coordconv_lab import nn_ops
from coordconv_lab.nn_ops import BatchNormState, ConvSpec, CoordSpec, ShapeError
from coordconv_lab.rng import Rng
from coordconv_lab.tensor import Tensor, Uniform, load_checkpoint, save_checkpoint, tensor_new

CANVAS = 64

INPUT_MODES = {
    'coords-1x1': (1, 1, 2),
    'coords-tiled': (CANVAS, CANVAS, 2),
    'image': (CANVAS, CANVAS, 1),
}
OUTPUT_HEADS = {
    'logits-4096': (CANVAS, CANVAS, 1),
    'coords-2': (2,),
    'image-64x64': (CANVAS, CANVAS, 1),
}
TASK_HEADS = {'cls': 'logits-4096', 'reg': 'coords-2', 'ren': 'image-64x64'}

LAYER_KINDS = ('conv', 'deconv', 'coordconv', 'dense', 'maxpool', 'globalpool', 'batchnorm')
PARAMETRIC = ('conv', 'deconv', 'coordconv', 'dense')

DECONV_FILTER_SIZES = (2, 3, 4)
HYPER_RANGES = {
    'DECONV-CLS': {'fs': DECONV_FILTER_SIZES, 'c_mult': (1, 2, 3)},
    'DECONV-REN': {'fs': DECONV_FILTER_SIZES, 'c_mult': (2, 3)},
}
HYPER_DEFAULTS = {
    'DECONV-CLS': {'fs': 2, 'c_mult': 1},
    'DECONV-REN': {'fs': 2, 'c_mult': 2},
}

EXPECTED_PARAMS = {
    'CC-CLS': 7553,
    'CC-REG': 906,
    'CC-REN': 9497,
    'CONV-REG-Q': 12914,
    'CONV-REG-U': 72850,
}
PARAM_BANDS = {
    'CC-REG': (880, 930),
    'CC-REN': (int(9490 * 0.85), int(9490 * 1.15)),
    'CONV-REG-Q': (11000, 14000),
    'DECONV-CLS': (int(50000 * 0.9), int(1600000 * 1.1)),
}


class LayerSpec(NamedTuple):
    kind: str
    c_out: int = 0
    k: int = 1
    stride: int = 1
    padding: str = 'same'
    activation: str = 'linear'
    with_r: bool = False

    def to_text(self) -> str:
        if self.kind == 'maxpool':
            return 'MP 2x2'
        if self.kind == 'globalpool':
            return 'GP'
        if self.kind == 'batchnorm':
            return 'BN'
        if self.kind == 'dense':
            return f"FC {self.c_out}"
        notes = []
        if self.stride != 1:
            notes.append(f"s{self.stride}")
        if self.padding != 'same':
            notes.append(self.padding)
        kernel = f"{self.k}x{self.k}" + (f" ({', '.join(notes)})" if notes else '')
        prefix = {'conv': '', 'deconv': 'Deconv ', 'coordconv': 'CoordConv-r ' if self.with_r else 'CoordConv '}
        return f"{prefix[self.kind]}{kernel},{self.c_out}"


class LayerTrace(NamedTuple):
    index: int
    layer: LayerSpec
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    params: int


def _layer_output(layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[Tuple[int, ...], int]:
    """Per-example output shape and parameter count of one layer"""
    kind = layer.kind
    if kind == 'dense':
        features = int(np.prod(shape))
        return (layer.c_out,), nn_ops.layer_param_count('dense', features, layer.c_out)
    if len(shape) != 3:
        raise ShapeError(f"{layer.to_text()} needs a spatial input, got {shape}")
    h, w, c = shape

    if kind in ('conv', 'coordconv'):
        oh = nn_ops.conv_output_extent(h, layer.k, layer.stride, layer.padding)[0]
        ow = nn_ops.conv_output_extent(w, layer.k, layer.stride, layer.padding)[0]
        d = CoordSpec(with_r=layer.with_r).d if kind == 'coordconv' else 0
        return (oh, ow, layer.c_out), nn_ops.layer_param_count(kind, c, layer.c_out, layer.k, d)
    if kind == 'deconv':
        oh = nn_ops.transpose_output_extent(h, layer.k, layer.stride, layer.padding)[0]
        ow = nn_ops.transpose_output_extent(w, layer.k, layer.stride, layer.padding)[0]
        return (oh, ow, layer.c_out), nn_ops.layer_param_count('deconv', c, layer.c_out, layer.k)
    if kind == 'maxpool':
        if h % 2 or w % 2:
            raise ShapeError(f"MP 2x2 needs even extents, got {h}x{w}")
        return (h // 2, w // 2, c), 0
    if kind == 'globalpool':
        return (c,), 0
    if kind == 'batchnorm':
        return shape, nn_ops.layer_param_count('batchnorm', c)
    raise ValueError(f"Unknown layer kind {kind!r}")


class Architecture:
    """Immutable network description; trace() runs shape inference"""

    def __init__(self, name: str, input_mode: str, layers: List[LayerSpec], output_head: str,
                 hyper: Optional[Dict[str, Any]] = None):
        if input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {sorted(INPUT_MODES)}, got {input_mode!r}")
        if output_head not in OUTPUT_HEADS:
            raise ValueError(f"output_head must be one of {sorted(OUTPUT_HEADS)}, got {output_head!r}")
        for layer in layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"Unknown layer kind {layer.kind!r}")
        self.name = name
        self.input_mode = input_mode
        self.layers = tuple(layers)
        self.output_head = output_head
        self.hyper = dict(hyper or {})
        self._trace = tuple(self._infer())

    def _infer(self) -> List[LayerTrace]:
        shape = INPUT_MODES[self.input_mode]
        entries = []
        for index, layer in enumerate(self.layers):
            out_shape, params = _layer_output(layer, shape)
            entries.append(LayerTrace(index, layer, shape, out_shape, params))
            shape = out_shape
        if shape != OUTPUT_HEADS[self.output_head]:
            raise ShapeError(f"{self.name}: final shape {shape} does not fit head {self.output_head}")
        return entries

    def trace(self) -> Tuple[LayerTrace, ...]:
        return self._trace

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return INPUT_MODES[self.input_mode]

    @property
    def task(self) -> str:
        return next(task for task, head in TASK_HEADS.items() if head == self.output_head)

    @property
    def family(self) -> str:
        return self.name.split('-')[0]

    def param_count(self) -> int:
        return nn_ops.param_count(self)

    def to_text(self) -> str:
        return ' - '.join(layer.to_text() for layer in self.layers)

    def describe(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'input_mode': self.input_mode,
            'output_head': self.output_head,
            'hyper': self.hyper,
            'layers': self.to_text(),
            'params': self.param_count(),
        }

    def __repr__(self):
        return f"Architecture({self.name!r}, {self.to_text()!r})"


# builders

def _hidden(layers: List[LayerSpec]) -> List[LayerSpec]:
    """ReLU on every parametric layer but the last"""
    last = max(i for i, layer in enumerate(layers) if layer.kind in PARAMETRIC)
    return [layer._replace(activation='relu') if layer.kind in PARAMETRIC and i != last else layer
            for i, layer in enumerate(layers)]


def _conv(c_out, k=1, stride=1):
    return LayerSpec('conv', c_out=c_out, k=k, stride=stride)


def _deconv_stack(fs: int, c_mult: int) -> List[LayerSpec]:
    plan = [64 * c_mult, 64 * c_mult, 64 * c_mult, 32 * c_mult, 32 * c_mult, 1]
    return [LayerSpec('deconv', c_out=c, k=fs, stride=2) for c in plan]


def _cc_cls(hyper, with_r):
    return 'coords-tiled', [LayerSpec('coordconv', 32, with_r=with_r), _conv(32), _conv(64), _conv(64), _conv(1)], 'logits-4096'


def _cc_ren(hyper, with_r):
    layers = [LayerSpec('coordconv', 32, with_r=with_r), _conv(32), _conv(64), _conv(32),
              _conv(8, 3), _conv(24, 3), _conv(1)]
    return 'coords-tiled', layers, 'image-64x64'


def _cc_reg(hyper, with_r):
    layers = [LayerSpec('coordconv', 8, with_r=with_r), _conv(8), _conv(8), _conv(8, 3), _conv(2, 3),
              LayerSpec('globalpool')]
    return 'image', layers, 'coords-2'


def _conv_reg_u(hyper, with_r):
    pool = LayerSpec('maxpool')
    layers = [_conv(16, 3), pool, _conv(16, 3), pool, _conv(16, 3), pool, _conv(16, 3),
              LayerSpec('dense', 64), LayerSpec('dense', 2)]
    return 'image', layers, 'coords-2'


def _conv_reg_q(hyper, with_r):
    bn = LayerSpec('batchnorm')
    layers = [_conv(16, 5, 2), _conv(16), bn, _conv(16, 3), _conv(16, 3, 2), _conv(16, 3, 2), bn,
              _conv(16, 3, 2), _conv(16), _conv(16, 3, 2), _conv(2, 3), LayerSpec('globalpool')]
    return 'image', layers, 'coords-2'


def _deconv_cls(hyper, with_r):
    return 'coords-1x1', _deconv_stack(hyper['fs'], hyper['c_mult']), 'logits-4096'


def _deconv_ren(hyper, with_r):
    return 'coords-1x1', _deconv_stack(hyper['fs'], hyper['c_mult']), 'image-64x64'


BUILDERS = {
    'DECONV-CLS': _deconv_cls,
    'CC-CLS': _cc_cls,
    'CONV-REG-U': _conv_reg_u,
    'CONV-REG-Q': _conv_reg_q,
    'CC-REG': _cc_reg,
    'DECONV-REN': _deconv_ren,
    'CC-REN': _cc_ren,
}
MODEL_NAMES = tuple(BUILDERS)


def _resolve_hyper(name: str, hyper: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    hyper = {key: value for key, value in (hyper or {}).items() if value is not None}
    ranges = HYPER_RANGES.get(name, {})
    unknown = set(hyper) - set(ranges)
    if unknown:
        raise ValueError(f"{name} takes no hyperparameters {sorted(unknown)}; accepted: {sorted(ranges) or 'none'}")
    resolved = dict(HYPER_DEFAULTS.get(name, {}))
    resolved.update(hyper)
    for key, value in resolved.items():
        if value not in ranges[key]:
            raise ValueError(f"{name}: {key}={value} out of range; accepted {list(ranges[key])}")
    return resolved


def build(name: str, hyper: Optional[Dict[str, Any]] = None, with_r: bool = False) -> Architecture:
    if name not in BUILDERS:
        raise ValueError(f"Unknown architecture {name!r}; choose from {list(MODEL_NAMES)}")
    if with_r and not name.startswith('CC-'):
        raise ValueError(f"--with-r applies to CoordConv models only, not {name}")
    resolved = _resolve_hyper(name, hyper)
    input_mode, layers, head = BUILDERS[name](resolved, with_r)
    if with_r:
        resolved['with_r'] = True
    arch = Architecture(name, input_mode, _hidden(layers), head, resolved)

    count = arch.param_count()
    expected = EXPECTED_PARAMS.get(name)
    if expected is not None and not with_r and count != expected:
        raise RuntimeError(f"{name} has {count} parameters, expected {expected}")
    band = PARAM_BANDS.get(name)
    if band is not None and not with_r and not band[0] <= count <= band[1]:
        raise RuntimeError(f"{name} has {count} parameters, outside [{band[0]}, {band[1]}]")
    return arch


def param_count(arch: Architecture) -> int:
    return nn_ops.param_count(arch)


# instantiation

def _glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Network:
    """Parameters and forward pass of one Architecture"""

    def __init__(self, arch: Architecture, rng: Rng, dtype=np.float32, coord_path: str = 'split'):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.coord_path = coord_path
        self.logger = logging.getLogger(__name__)
        self.weights: Dict[str, Tensor] = {}
        self.norms: Dict[str, BatchNormState] = {}

        for entry in arch.trace():
            layer, prefix = entry.layer, f"{entry.index:02d}_{entry.layer.kind}"
            c_in = entry.in_shape[-1]
            if layer.kind in ('conv', 'coordconv', 'deconv'):
                d = CoordSpec(with_r=layer.with_r).d if layer.kind == 'coordconv' else 0
                fan_in, fan_out = layer.k ** 2 * (c_in + d), layer.k ** 2 * layer.c_out
                if layer.kind == 'deconv':
                    shape = (layer.k, layer.k, layer.c_out, c_in)
                else:
                    shape = (layer.k, layer.k, c_in + d, layer.c_out)
                self._add_dense_pair(prefix, shape, layer.c_out, fan_in, fan_out, rng)
            elif layer.kind == 'dense':
                features = int(np.prod(entry.in_shape))
                self._add_dense_pair(prefix, (features, layer.c_out), layer.c_out, features, layer.c_out, rng)
            elif layer.kind == 'batchnorm':
                self.norms[prefix] = BatchNormState(c_in, dtype=self.dtype)

        self.logger.debug(f"Initialized {arch.name} with {self.num_parameters()} parameters")

    def _add_dense_pair(self, prefix, shape, bias_size, fan_in, fan_out, rng):
        bound = _glorot_bound(fan_in, fan_out)
        self.weights[f"{prefix}.weight"] = tensor_new(shape, Uniform(-bound, bound), rng, dtype=self.dtype,
                                                      requires_grad=True, name=f"{prefix}.weight")
        self.weights[f"{prefix}.bias"] = tensor_new([bias_size], 0.0, dtype=self.dtype,
                                                    requires_grad=True, name=f"{prefix}.bias")

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def named_parameters(self) -> Dict[str, Tensor]:
        named = dict(self.weights)
        for prefix, state in self.norms.items():
            named[f"{prefix}.gamma"] = state.gamma
            named[f"{prefix}.beta"] = state.beta
        return dict(sorted(named.items()))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if tuple(x.shape[1:]) != self.arch.input_shape:
            raise ShapeError(f"{self.arch.name} expects input [n, {self.arch.input_shape}], got {x.shape}")
        n = x.shape[0]
        for entry in self.arch.trace():
            layer, prefix = entry.layer, f"{entry.index:02d}_{entry.layer.kind}"
            w = self.weights.get(f"{prefix}.weight")
            b = self.weights.get(f"{prefix}.bias")
            c_in = entry.in_shape[-1]
            if layer.kind == 'conv':
                x = nn_ops.conv2d(x, ConvSpec(layer.k, c_in, layer.c_out, layer.stride, layer.padding), w, b)
            elif layer.kind == 'coordconv':
                x = nn_ops.coord_conv(x, ConvSpec(layer.k, c_in, layer.c_out, layer.stride, layer.padding),
                                      CoordSpec(with_r=layer.with_r), w, b, path=self.coord_path)
            elif layer.kind == 'deconv':
                x = nn_ops.conv2d_transpose(x, ConvSpec(layer.k, c_in, layer.c_out, layer.stride, layer.padding), w, b)
            elif layer.kind == 'dense':
                x = nn_ops.dense(x.reshape(n, -1) if x.ndim > 2 else x, w, b)
            elif layer.kind == 'maxpool':
                x = nn_ops.max_pool2(x)
            elif layer.kind == 'globalpool':
                x = nn_ops.global_avg_pool(x)
            elif layer.kind == 'batchnorm':
                x = nn_ops.batch_norm(x, self.norms[prefix], training)
            if layer.activation == 'relu':
                x = nn_ops.relu(x)

        if self.arch.output_head == 'logits-4096':
            x = x.reshape(n, CANVAS * CANVAS)
        return x

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics"""
        state = {name: p.data for name, p in self.named_parameters().items()}
        for prefix, norm in self.norms.items():
            state[f"{prefix}.running_mean"] = norm.running_mean
            state[f"{prefix}.running_var"] = norm.running_var
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        expected = self.state_dict()
        missing = set(expected) - set(state)
        unexpected = set(state) - set(expected)
        if missing or unexpected:
            raise ValueError(f"State mismatch for {self.arch.name}: missing {sorted(missing)}, "
                             f"unexpected {sorted(unexpected)}")
        for name, value in state.items():
            if value.shape != expected[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {expected[name].shape}")
        named = self.named_parameters()
        for name, value in state.items():
            value = np.array(value, dtype=self.dtype)
            if name in named:
                named[name].data = value
            else:
                prefix, field = name.rsplit('.', 1)
                setattr(self.norms[prefix], field, value)

    def save(self, path: str):
        save_checkpoint(path, self.state_dict())

    def load(self, path: str):
        self.load_state_dict(load_checkpoint(path))
