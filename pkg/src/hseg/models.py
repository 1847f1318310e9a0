"""U-Nets and the hierarchical lung -> class cascade.

Parameters live in a flat, ordered ``{name: float32 ndarray}`` mapping. A
forward pass wraps them as leaf tensors so the caller can differentiate
with respect to every one of them.
"""

from dataclasses import dataclass

import numpy as np

from hseg import tensor as T
from hseg.errors import ConfigError, GeometryError

IMAGE_CHANNELS = 1
NUM_CLASSES = 4


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def divisor(self):
        return 2 ** self.depth

    def widths(self):
        """Channel width of each encoder level followed by the bottleneck."""
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def conv_shapes(self, prefix):
        """Ordered ``(name, kernel_shape)`` for every convolution of the net.

        The 1x1 channel adapter comes first so its input width is recorded
        in the parameter shapes.
        """
        k = self.kernel_size
        widths = self.widths()
        shapes = [(f"{prefix}.adapter", (self.base_channels, self.in_channels, 1, 1))]
        cin = self.base_channels
        for i in range(self.depth):
            shapes.append((f"{prefix}.enc{i}.conv1", (widths[i], cin, k, k)))
            shapes.append((f"{prefix}.enc{i}.conv2", (widths[i], widths[i], k, k)))
            cin = widths[i]
        shapes.append((f"{prefix}.mid.conv1", (widths[-1], cin, k, k)))
        shapes.append((f"{prefix}.mid.conv2", (widths[-1], widths[-1], k, k)))
        cin = widths[-1]
        for i in reversed(range(self.depth)):
            shapes.append((f"{prefix}.dec{i}.conv1", (widths[i], cin + widths[i], k, k)))
            shapes.append((f"{prefix}.dec{i}.conv2", (widths[i], widths[i], k, k)))
            cin = widths[i]
        shapes.append((f"{prefix}.head", (self.out_channels, cin, 1, 1)))
        return shapes

    def parameter_count(self):
        return sum(int(np.prod(s)) + s[0] for _, s in self.conv_shapes("x"))


def init_params(shapes, rng):
    """He-normal kernels (std sqrt(2 / fan_in)) and zero biases."""
    params = {}
    for name, shape in shapes:
        fan_in = shape[1] * shape[2] * shape[3]
        params[f"{name}.w"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        params[f"{name}.b"] = np.zeros(shape[0], dtype=np.float32)
    return params


def _conv(p, name, x, relu=True):
    w = p[f"{name}.w"]
    y = T.conv2d(x, w, p[f"{name}.b"], stride=1, padding=w.shape[2] // 2)
    return T.relu(y) if relu else y


def unet_logits(p, prefix, cfg, x):
    """Adapter, encoder, bottleneck, decoder with skip concatenation, 1x1 head."""
    h = _conv(p, f"{prefix}.adapter", x, relu=False)
    skips = []
    for i in range(cfg.depth):
        h = _conv(p, f"{prefix}.enc{i}.conv1", h)
        h = _conv(p, f"{prefix}.enc{i}.conv2", h)
        skips.append(h)
        h = T.maxpool2(h)
    h = _conv(p, f"{prefix}.mid.conv1", h)
    h = _conv(p, f"{prefix}.mid.conv2", h)
    for i in reversed(range(cfg.depth)):
        h = T.concat_channels(T.upsample_nearest2(h), skips[i])
        h = _conv(p, f"{prefix}.dec{i}.conv1", h)
        h = _conv(p, f"{prefix}.dec{i}.conv2", h)
    return _conv(p, f"{prefix}.head", h, relu=False)


class _ParamModel:
    def __init__(self, params):
        self.params = params

    def parameter_count(self):
        return sum(a.size for a in self.params.values())

    def leaves(self, requires_grad=True, dtype=np.float32):
        return {k: T.Tensor(v, requires_grad=requires_grad, dtype=dtype) for k, v in self.params.items()}

    def copy(self):
        return type(self)(*self._configs(), {k: v.copy() for k, v in self.params.items()})

    def _check_image(self, image, divisor):
        if image.ndim != 4 or image.shape[1] != IMAGE_CHANNELS:
            raise GeometryError(f"expected image tensor [N,1,H,W], got shape {image.shape}")
        h, w = image.shape[2], image.shape[3]
        if h % divisor or w % divisor:
            raise GeometryError(f"image size {h}x{w} must be divisible by {divisor}")

    def predict(self, image):
        """Inference on ``[N,1,H,W]`` or ``[H,W]`` arrays; returns numpy outputs."""
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, None]
        lung, cls = self.forward(T.Tensor(arr), self.leaves(requires_grad=False))
        return lung.data, cls.data


class HUNet(_ParamModel):
    """Lung U-Net whose soft output feeds the class U-Net as an extra channel."""

    kind = "hunet"

    def __init__(self, lcfg, ccfg, params):
        if ccfg.in_channels != IMAGE_CHANNELS + lcfg.out_channels:
            raise ConfigError(
                f"C-Net in_channels must be {IMAGE_CHANNELS + lcfg.out_channels}, got {ccfg.in_channels}")
        if lcfg.out_channels != 1 or ccfg.out_channels != NUM_CLASSES:
            raise ConfigError("L-Net must emit 1 channel and C-Net 4 channels")
        super().__init__(params)
        self.lcfg = lcfg
        self.ccfg = ccfg

    def _configs(self):
        return self.lcfg, self.ccfg

    @property
    def divisor(self):
        return max(self.lcfg.divisor, self.ccfg.divisor)

    def forward(self, image, leaves):
        self._check_image(image, self.divisor)
        lung = T.sigmoid(unet_logits(leaves, "lnet", self.lcfg, image))
        cin = T.concat_channels(image, lung)
        cls = T.softmax_channels(unet_logits(leaves, "cnet", self.ccfg, cin))
        return lung, cls


class FlatCNet(_ParamModel):
    """The class U-Net alone on the raw image (ablation without hierarchy).

    Its lung probability is the complement of the non-lung class.
    """

    kind = "flat"

    def __init__(self, ccfg, params):
        if ccfg.in_channels != IMAGE_CHANNELS or ccfg.out_channels != NUM_CLASSES:
            raise ConfigError("flat C-Net needs in_channels=1 and out_channels=4")
        super().__init__(params)
        self.ccfg = ccfg

    def _configs(self):
        return (self.ccfg,)

    @property
    def divisor(self):
        return self.ccfg.divisor

    def forward(self, image, leaves):
        self._check_image(image, self.divisor)
        cls = T.softmax_channels(unet_logits(leaves, "cnet", self.ccfg, image))
        return 1.0 - cls[:, 0:1], cls


def default_configs(depth=3, base_channels=8, kernel_size=3):
    lcfg = UNetConfig(depth, base_channels, IMAGE_CHANNELS, 1, kernel_size)
    ccfg = UNetConfig(depth, base_channels, IMAGE_CHANNELS + 1, NUM_CLASSES, kernel_size)
    return lcfg, ccfg


def build_hunet(lcfg=None, ccfg=None, seed=0):
    if lcfg is None or ccfg is None:
        dl, dc = default_configs()
        lcfg, ccfg = lcfg or dl, ccfg or dc
    rng = np.random.default_rng(seed)
    params = init_params(lcfg.conv_shapes("lnet") + ccfg.conv_shapes("cnet"), rng)
    return HUNet(lcfg, ccfg, params)


def build_flat_cnet(ccfg=None, seed=0):
    ccfg = ccfg or UNetConfig(3, 8, IMAGE_CHANNELS, NUM_CLASSES, 3)
    rng = np.random.default_rng(seed)
    return FlatCNet(ccfg, init_params(ccfg.conv_shapes("cnet"), rng))


def build_model(kind, depth=3, base_channels=8, kernel_size=3, seed=0):
    if kind == "hunet":
        return build_hunet(*default_configs(depth, base_channels, kernel_size), seed=seed)
    if kind == "flat":
        cfg = UNetConfig(depth, base_channels, IMAGE_CHANNELS, NUM_CLASSES, kernel_size)
        return build_flat_cnet(cfg, seed=seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def hunet_forward(model, image, leaves=None):
    """Run the cascade; ``leaves`` defaults to non-differentiable parameters."""
    if not isinstance(image, T.Tensor):
        image = T.Tensor(image)
    if leaves is None:
        leaves = model.leaves(requires_grad=False, dtype=image.dtype)
    return model.forward(image, leaves)
