"""Small quantized CNN/MLP classifiers with per-site quantizers attached.

Each weight tensor carries a per-output-channel quantizer and each activation
site (the network input plus every relu output) carries a per-tensor one.
The first and last weight layers, and the activation sites adjacent to them,
are pinned to 8 bits; interior sites use the configured bit widths. Bit width
32 disables quantization at a site entirely.

Architectures are desk-scale: ``tinycnn`` (two conv blocks and a classifier),
``mlp``, and ``resnet18_narrow`` (the 18-layer residual layout at quarter
width; ``resnet18`` selects full width). BatchNorm is intentionally absent to
keep the autodiff core small.
"""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import CalibrationError, ConfigError, ShapeError, StateError
from .quantization import MinMaxObserver, QuantSpec, calibrate, fake_quantize

FP_BITS = 32  # sentinel: quantization disabled at this site


class QuantSite:
    """One quantizer attachment point: metadata, observer, and (later) spec."""

    def __init__(self, name: str, bits: int, axis: int | None, kind: str):
        self.name = name
        self.bits = bits
        self.axis = axis
        self.kind = kind                      # "weight" or "activation"
        self.observer = MinMaxObserver(axis=axis)
        self.spec: QuantSpec | None = None

    @property
    def enabled(self) -> bool:
        return self.bits != FP_BITS

    def apply(self, x: Tensor, quantize: bool, observe: bool) -> Tensor:
        if not self.enabled:
            return x
        if observe and self.spec is None:
            self.observer.observe(x.data)
        if quantize and self.spec is not None:
            return fake_quantize(x, self.spec)
        return x


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2dLayer:
    def __init__(self, name, c_in, c_out, kernel, stride, padding, wbits, rng, dtype):
        self.name = name
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(
            _he_normal(rng, (c_out, c_in, kernel, kernel), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.weight_site = QuantSite(f"{name}.weight", wbits, axis=0, kind="weight")

    def forward(self, x, quantize, observe):
        w = self.weight_site.apply(self.weight, quantize, observe)
        return autodiff.conv2d(x, w, self.bias, self.stride, self.padding)

    def named_parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def sites(self):
        return [self.weight_site]


class LinearLayer:
    def __init__(self, name, d_in, d_out, wbits, rng, dtype):
        self.name = name
        self.weight = Tensor(
            _he_normal(rng, (d_out, d_in), d_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        self.weight_site = QuantSite(f"{name}.weight", wbits, axis=0, kind="weight")

    def forward(self, x, quantize, observe):
        w = self.weight_site.apply(self.weight, quantize, observe)
        return autodiff.linear(x, w, self.bias)

    def named_parameters(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def sites(self):
        return [self.weight_site]


class ReLULayer:
    def __init__(self, name, abits):
        self.name = name
        self.act_site = QuantSite(f"{name}.act", abits, axis=None, kind="activation")

    def forward(self, x, quantize, observe):
        return self.act_site.apply(autodiff.relu(x), quantize, observe)

    def named_parameters(self):
        return []

    def sites(self):
        return [self.act_site]


class InputQuantLayer:
    def __init__(self, name, abits):
        self.name = name
        self.act_site = QuantSite(f"{name}.act", abits, axis=None, kind="activation")

    def forward(self, x, quantize, observe):
        return self.act_site.apply(x, quantize, observe)

    def named_parameters(self):
        return []

    def sites(self):
        return [self.act_site]


class AvgPoolLayer:
    def __init__(self, name, window):
        self.name = name
        self.window = window

    def forward(self, x, quantize, observe):
        return autodiff.avg_pool2d(x, self.window)

    def named_parameters(self):
        return []

    def sites(self):
        return []


class FlattenLayer:
    def __init__(self, name):
        self.name = name

    def forward(self, x, quantize, observe):
        return autodiff.flatten(x)

    def named_parameters(self):
        return []

    def sites(self):
        return []


class BasicBlock:
    """conv-relu-conv plus skip connection, relu after the add.

    Activation quantizers sit after each relu only; the downsample path,
    when present, is a 1x1 strided conv at the interior bit width.
    """

    def __init__(self, name, c_in, c_out, stride, wbits, abits, rng, dtype):
        self.name = name
        self.conv1 = Conv2dLayer(f"{name}.conv1", c_in, c_out, 3, stride, 1,
                                 wbits, rng, dtype)
        self.relu1 = ReLULayer(f"{name}.relu1", abits)
        self.conv2 = Conv2dLayer(f"{name}.conv2", c_out, c_out, 3, 1, 1,
                                 wbits, rng, dtype)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = Conv2dLayer(f"{name}.down", c_in, c_out, 1, stride, 0,
                                          wbits, rng, dtype)
        self.relu2 = ReLULayer(f"{name}.relu2", abits)

    def forward(self, x, quantize, observe):
        out = self.conv1.forward(x, quantize, observe)
        out = self.relu1.forward(out, quantize, observe)
        out = self.conv2.forward(out, quantize, observe)
        skip = x if self.downsample is None else self.downsample.forward(
            x, quantize, observe
        )
        return self.relu2.forward(autodiff.add(out, skip), quantize, observe)

    def _children(self):
        out = [self.conv1, self.relu1, self.conv2]
        if self.downsample is not None:
            out.append(self.downsample)
        out.append(self.relu2)
        return out

    def named_parameters(self):
        return [p for child in self._children() for p in child.named_parameters()]

    def sites(self):
        return [s for child in self._children() for s in child.sites()]


class ModelState:
    """Ordered layers, parameters, and quantizer sites for one network role."""

    def __init__(self, arch, num_classes, wbits, abits, layers, role="student"):
        self.arch = arch
        self.num_classes = num_classes
        self.wbits = wbits
        self.abits = abits
        self.layers = layers
        self.role = role

    # -- structure ----------------------------------------------------------

    def named_parameters(self):
        return [p for layer in self.layers for p in layer.named_parameters()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def quant_sites(self):
        return [s for layer in self.layers for s in layer.sites()]

    def weight_sites(self):
        return [s for s in self.quant_sites() if s.kind == "weight"]

    def activation_sites(self):
        return [s for s in self.quant_sites() if s.kind == "activation"]

    def learnable_steps(self):
        return [
            s.spec.step
            for s in self.quant_sites()
            if s.spec is not None and s.spec.step_learnable
        ]

    def conv_layers(self):
        out = []
        stack = list(self.layers)
        while stack:
            layer = stack.pop(0)
            if isinstance(layer, Conv2dLayer):
                out.append(layer)
            elif isinstance(layer, BasicBlock):
                stack = layer._children() + stack
        return out

    def num_parameters(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.parameters())

    @property
    def calibrated(self) -> bool:
        return all(s.spec is not None for s in self.quant_sites() if s.enabled)

    # -- compute ------------------------------------------------------------

    def forward(self, x, quantize: bool = True, observe: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, H, W] input, got {x.shape}")
        out = x
        for layer in self.layers:
            out = layer.forward(out, quantize, observe)
        return out

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()
        for t in self.learnable_steps():
            t.zero_grad()


ARCHS = ("tinycnn", "mlp", "resnet18_narrow", "resnet18")

_VALID_BITS = (2, 3, 4, 8, FP_BITS)


def build_model(arch: str, num_classes: int = 10, wbits: int = 4, abits: int = 4,
                seed: int = 0, dtype=np.float32) -> ModelState:
    """Assemble an architecture with its bit-width policy applied.

    Interior weight sites get ``wbits`` (per output channel) and interior
    activation sites get ``abits`` (per tensor); the first and last weight
    layers plus the activation sites adjacent to them are forced to 8 bits.
    ``wbits=32`` / ``abits=32`` disable the corresponding quantizers.
    """
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture '{arch}'; choose from {ARCHS}")
    if wbits not in _VALID_BITS or abits not in _VALID_BITS:
        raise ConfigError(
            f"bit widths must be one of {_VALID_BITS}, got W{wbits}A{abits}"
        )
    rng = np.random.default_rng(seed)

    def w_edge(bits):      # first/last weight layers stay at 8 bits
        return 8 if bits != FP_BITS else FP_BITS

    def a_edge(bits):      # activation sites adjacent to first/last layers
        return 8 if bits != FP_BITS else FP_BITS

    if arch == "tinycnn":
        layers = [
            InputQuantLayer("input", a_edge(abits)),
            Conv2dLayer("conv1", 3, 16, 3, 1, 1, w_edge(wbits), rng, dtype),
            ReLULayer("relu1", abits),
            AvgPoolLayer("pool1", 2),
            Conv2dLayer("conv2", 16, 32, 3, 1, 1, wbits, rng, dtype),
            ReLULayer("relu2", a_edge(abits)),
            AvgPoolLayer("pool2", 2),
            FlattenLayer("flatten"),
            LinearLayer("fc", 32 * 8 * 8, num_classes, w_edge(wbits), rng, dtype),
        ]
    elif arch == "mlp":
        layers = [
            InputQuantLayer("input", a_edge(abits)),
            FlattenLayer("flatten"),
            LinearLayer("fc1", 3 * 32 * 32, 256, w_edge(wbits), rng, dtype),
            ReLULayer("relu1", abits),
            LinearLayer("fc2", 256, 128, wbits, rng, dtype),
            ReLULayer("relu2", a_edge(abits)),
            LinearLayer("fc3", 128, num_classes, w_edge(wbits), rng, dtype),
        ]
    else:
        base = 64 if arch == "resnet18" else 16
        layers = [
            InputQuantLayer("input", a_edge(abits)),
            Conv2dLayer("stem", 3, base, 3, 1, 1, w_edge(wbits), rng, dtype),
            ReLULayer("stem_relu", abits),
        ]
        c_in = base
        for stage, (c_out, stride) in enumerate(
            [(base, 1), (2 * base, 2), (4 * base, 2), (8 * base, 2)], start=1
        ):
            for block in range(2):
                layers.append(
                    BasicBlock(
                        f"s{stage}b{block}", c_in, c_out,
                        stride if block == 0 else 1, wbits, abits, rng, dtype,
                    )
                )
                c_in = c_out
        layers += [
            AvgPoolLayer("gap", 4),
            FlattenLayer("flatten"),
            LinearLayer("fc", 8 * base, num_classes, w_edge(wbits), rng, dtype),
        ]
        # the activation feeding the classifier is the last block's relu2
        last_relu = layers[-4].relu2
        last_relu.act_site.bits = a_edge(abits)

    return ModelState(arch, num_classes, wbits, abits, layers)


def copy_into_teacher(student: ModelState) -> ModelState:
    """Deep copy of a calibrated student; the copy never receives gradients."""
    if not student.calibrated:
        raise StateError("student must be calibrated before creating a teacher")
    teacher = copy.deepcopy(student)
    teacher.role = "teacher"
    for t in teacher.parameters():
        t.requires_grad = False
        t.grad = None
    for site in teacher.quant_sites():
        if site.spec is not None:
            site.spec.step.requires_grad = False
            site.spec.step.grad = None
    return teacher


def calibrate_model(model: ModelState, images: np.ndarray,
                    batch_size: int = 128) -> None:
    """Initialize every quantizer from the calibration images.

    Weight ranges are taken from the current weights (per channel); activation
    ranges are observed by forwarding the calibration set with weight
    quantization already active. ``images`` must already be normalized.
    """
    if model.calibrated:
        return
    if len(images) == 0:
        raise CalibrationError("calibration set is empty")
    for layer in model.layers:
        _calibrate_weights(layer)
    with autodiff.no_grad():
        for start in range(0, len(images), batch_size):
            model.forward(images[start : start + batch_size],
                          quantize=True, observe=True)
    for site in model.activation_sites():
        if site.enabled and site.spec is None:
            site.spec = calibrate(site.observer, site.bits)
    _sanity_check_gap(model, images[: min(16, len(images))])


def _calibrate_weights(layer) -> None:
    if isinstance(layer, BasicBlock):
        for child in layer._children():
            _calibrate_weights(child)
        return
    for site in layer.sites():
        if site.kind == "weight" and site.enabled and site.spec is None:
            site.observer.observe(layer.weight.data)
            site.spec = calibrate(site.observer, site.bits)


def _sanity_check_gap(model: ModelState, images: np.ndarray) -> None:
    """Loose bound on quantized-vs-FP logit gap, meaningful at >= 8 bits."""
    sites = [s for s in model.quant_sites() if s.enabled]
    if not sites or any(s.bits < 8 for s in sites):
        return
    with autodiff.no_grad():
        q = model.forward(images, quantize=True).data
        fp = model.forward(images, quantize=False).data
    bound = 10.0 * sum(float(s.spec.step.data.max()) for s in sites)
    gap = float(np.abs(q - fp).max())
    if gap >= bound:
        raise StateError(
            f"quantized forward deviates from FP by {gap:.4g}, "
            f"exceeding the sanity bound {bound:.4g}"
        )
