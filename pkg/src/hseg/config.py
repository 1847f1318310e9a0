"""Flat ``key = value`` run configuration shared by all CLI commands.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are
rejected, and every value is checked by constructing the dataclass it
feeds. Ranges and weight vectors are comma-separated.
"""

from dataclasses import dataclass, field, replace

from hseg.ensemble import EnsembleConfig
from hseg.errors import ConfigError
from hseg.losses import LossConfig
from hseg.phantom import PhantomConfig
from hseg.training import TrainConfig


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(n):
    def parse(text):
        vals = tuple(float(t) for t in text.split(","))
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers, got {len(vals)}")
        return vals
    return parse


def _choice(*options):
    def parse(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    # phantom
    "n_volumes": (int, 12),
    "slices_per_volume": (int, 8),
    "image_size": (int, 64),
    "test_volumes": (int, 4),
    "noise_sigma": (float, 0.05),
    "blur_sigma": (float, 0.6),
    "max_ggo_blobs": (int, 3),
    "max_con_blobs": (int, 2),
    "healthy_range": (_floats(2), (0.05, 0.20)),
    "ggo_range": (_floats(2), (0.35, 0.55)),
    "con_range": (_floats(2), (0.65, 0.85)),
    "body_range": (_floats(2), (0.90, 1.0)),
    "blob_radius": (_floats(2), (0.07, 0.14)),
    # training
    "epochs": (int, 30),
    "batch_size": (int, 4),
    "patch_size": (int, 32),
    "learning_rate": (float, 2e-3),
    "lnet_loss_weight": (float, 1.0),
    "augment_flip": (_bool, True),
    # loss
    "lambda": (float, 0.5),
    "epsilon": (float, 1e-6),
    "log_clip": (float, 1e-7),
    "class_weighting": (_choice("sqrt_inverse", "inverse", "uniform"), "sqrt_inverse"),
    "class_weights": (_floats(4), None),
    # ensemble / model
    "k": (int, 6),
    "model": (_choice("hunet", "flat"), "hunet"),
    "depth": (int, 3),
    "base_channels": (int, 8),
    "kernel_size": (int, 3),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def override(self, **kwargs):
        """Apply already-typed overrides, ignoring None values."""
        vals = dict(self.values)
        for k, v in kwargs.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown configuration key {k!r}")
            vals[k] = v
        out = RunConfig(vals)
        out.validate()
        return out

    def set_text(self, key, text):
        vals = dict(self.values)
        vals[key] = parse_value(key, text)
        out = RunConfig(vals)
        out.validate()
        return out

    def phantom(self):
        v = self.values
        return PhantomConfig(
            n_volumes=v["n_volumes"], slices_per_volume=v["slices_per_volume"],
            image_size=v["image_size"], seed=v["seed"], test_volumes=v["test_volumes"],
            healthy_range=v["healthy_range"], ggo_range=v["ggo_range"], con_range=v["con_range"],
            body_range=v["body_range"], noise_sigma=v["noise_sigma"], blur_sigma=v["blur_sigma"],
            max_ggo_blobs=v["max_ggo_blobs"], max_con_blobs=v["max_con_blobs"],
            blob_radius=v["blob_radius"])

    def loss(self):
        v = self.values
        return LossConfig(class_weights=v["class_weights"], weighting=v["class_weighting"],
                          lam=v["lambda"], epsilon=v["epsilon"], clip=v["log_clip"])

    def train(self):
        v = self.values
        return TrainConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], patch_size=v["patch_size"],
            learning_rate=v["learning_rate"], loss=self.loss(), seed=v["seed"],
            lnet_loss_weight=v["lnet_loss_weight"], augment_flip=v["augment_flip"])

    def ensemble(self):
        v = self.values
        return EnsembleConfig(k=v["k"], base_seed=v["seed"], train=self.train(),
                              model_kind=v["model"], depth=v["depth"],
                              base_channels=v["base_channels"], kernel_size=v["kernel_size"])

    def validate(self):
        try:
            self.phantom()
            train = self.train()
            ens = self.ensemble()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if train.patch_size % (2 ** ens.depth):
            raise ConfigError(f"patch_size {train.patch_size} must be divisible by 2**depth = {2 ** ens.depth}")
        if train.patch_size > self.values["image_size"]:
            raise ConfigError("patch_size must not exceed image_size")
        return self


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return parser(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text.strip()!r} ({exc})") from None


def parse_config_text(text, source="<config>"):
    cfg = RunConfig()
    vals = dict(cfg.values)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            vals[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return RunConfig(vals).validate()


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def format_config(cfg):
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(repr(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.values.items() if v is not None)


def with_defaults(cfg, **kwargs):
    return replace(cfg, values={**cfg.values, **kwargs})
