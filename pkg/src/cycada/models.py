"""Network builders for the four adversarial-adaptation roles plus checkpointing.

Architectures are declared as ordered layer-descriptor lists so they can be
validated, serialized into checkpoints, and rebuilt without pickling code.
All builders draw their initial weights from a dedicated seeded generator,
so two builds with the same seed are bitwise identical.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FrozenModelError, IntegrityError

CHECKPOINT_FORMAT_VERSION = 1

ROLES = ("task-net", "generator", "image-discriminator", "feature-discriminator", "toy-seg-net")

FEATURE_SCORES = "scores"
FEATURE_PENULTIMATE = "penultimate"


@dataclass
class ArchitectureSpec:
    """Declarative description of a network: role, input shape, layer list.

    ``options`` holds role-specific settings (class count, feature tap,
    debug flags). The layer list is validated for shape compatibility
    against ``input_shape`` at build time.
    """

    role: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "input_shape": list(self.input_shape),
            "layers": copy.deepcopy(self.layers),
            "options": copy.deepcopy(self.options),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(
            role=data["role"],
            input_shape=tuple(data["input_shape"]),
            layers=copy.deepcopy(data["layers"]),
            options=copy.deepcopy(data.get("options", {})),
        )


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _deconv_out(size: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _infer_shapes(spec: ArchitectureSpec) -> list:
    """Propagate the input shape through the layer list; reject mismatches."""
    shape = tuple(spec.input_shape)
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("conv", "deconv"):
            if len(shape) != 3:
                raise ValueError(f"layer {i} ({kind}) expects (C,H,W) input, got {shape}")
            c, h, w = shape
            if layer["in"] != c:
                raise ValueError(f"layer {i} ({kind}) expects {layer['in']} channels, got {c}")
            k, s, p = layer["kernel"], layer["stride"], layer["padding"]
            if kind == "conv":
                h, w = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
            else:
                op = layer.get("output_padding", 0)
                h, w = _deconv_out(h, k, s, p, op), _deconv_out(w, k, s, p, op)
            if h < 1 or w < 1:
                raise ValueError(f"layer {i} ({kind}) collapses spatial dims to {h}x{w}")
            shape = (layer["out"], h, w)
        elif kind == "maxpool":
            c, h, w = shape
            k = layer["kernel"]
            shape = (c, h // k, w // k)
            if shape[1] < 1 or shape[2] < 1:
                raise ValueError(f"layer {i} (maxpool) collapses spatial dims")
        elif kind == "residual":
            if shape[0] != layer["channels"]:
                raise ValueError(
                    f"layer {i} (residual) expects {layer['channels']} channels, got {shape[0]}"
                )
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "fc":
            if len(shape) != 1 or shape[0] != layer["in"]:
                raise ValueError(f"layer {i} (fc) expects ({layer['in']},) input, got {shape}")
            shape = (layer["out"],)
        elif kind == "dropout":
            pass
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        shapes.append(shape)
    return shapes


class _ResidualBlock(nn.Module):
    """Two 3x3 convs with instance norm; identity skip connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


_ACTIVATIONS = {
    "relu": nn.ReLU,
    "lrelu": lambda: nn.LeakyReLU(0.2),
    "tanh": nn.Tanh,
}


def _compile_layers(layers: list) -> nn.Sequential:
    modules = []
    for layer in layers:
        kind = layer["kind"]
        if kind == "conv":
            modules.append(
                nn.Conv2d(layer["in"], layer["out"], layer["kernel"], layer["stride"], layer["padding"])
            )
        elif kind == "deconv":
            modules.append(
                nn.ConvTranspose2d(
                    layer["in"],
                    layer["out"],
                    layer["kernel"],
                    layer["stride"],
                    layer["padding"],
                    output_padding=layer.get("output_padding", 0),
                )
            )
        elif kind == "maxpool":
            modules.append(nn.MaxPool2d(layer["kernel"]))
        elif kind == "residual":
            modules.append(_ResidualBlock(layer["channels"]))
        elif kind == "flatten":
            modules.append(nn.Flatten())
        elif kind == "fc":
            modules.append(nn.Linear(layer["in"], layer["out"]))
        elif kind == "dropout":
            modules.append(nn.Dropout(layer["p"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if layer.get("norm") == "instance":
            modules.append(nn.InstanceNorm2d(layer["out"]))
        act = layer.get("act")
        if act is not None:
            modules.append(_ACTIVATIONS[act]())
    return nn.Sequential(*modules)


class _TaskNet(nn.Module):
    """Classifier with a tappable feature layer ahead of the score head."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        tap = spec.options["feature_tap"]
        self.trunk = _compile_layers(spec.layers[:tap])
        self.head = _compile_layers(spec.layers[tap:])

    def forward(self, x):
        return self.head(self.trunk(x))

    def forward_features(self, x):
        feat = self.trunk(x)
        return feat, self.head(feat)


class _Generator(nn.Module):
    """Image-to-image translator; ``identity_debug`` bypasses the stack."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.identity_debug = bool(spec.options.get("identity_debug", False))
        self.body = _compile_layers(spec.layers)

    def forward(self, x):
        if self.identity_debug:
            return torch.tanh(x)
        return self.body(x)


class _FeatureDiscriminator(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.body = _compile_layers(spec.layers)

    def forward(self, x):
        return self.body(x).squeeze(-1)


def _seeded_init(module: nn.Module, spec: ArchitectureSpec, seed: int) -> None:
    """Deterministic weight init from a local generator.

    Conv and deconv weights follow the GAN-family convention N(0, 0.02);
    fully connected layers use He-scaled normals; biases start at zero.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data = torch.randn(m.weight.shape, generator=gen) * 0.02
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            fan_in = m.weight.shape[1]
            std = math.sqrt(2.0 / fan_in)
            m.weight.data = torch.randn(m.weight.shape, generator=gen) * std
            m.bias.data.zero_()


class ModelHandle:
    """A network plus its declarative spec and a freeze latch.

    Frozen handles refuse to hand out trainable parameters and have
    ``requires_grad`` cleared, so no optimizer can touch them.
    """

    def __init__(self, spec: ArchitectureSpec, module: nn.Module, frozen: bool = False):
        self.spec = spec
        self.module = module
        self.frozen = False
        if frozen:
            self.freeze()

    def __call__(self, x: torch.Tensor, *, train: bool = False) -> torch.Tensor:
        self.module.train(train and not self.frozen)
        return self.module(x)

    def features(self, x: torch.Tensor, *, train: bool = False) -> torch.Tensor:
        """Output of the designated adaptation feature layer (task nets only)."""
        if self.spec.role != "task-net":
            raise ValueError(f"role {self.spec.role!r} exposes no feature layer")
        self.module.train(train and not self.frozen)
        feat, logits = self.module.forward_features(x)
        if self.spec.options["feature_layer"] == FEATURE_PENULTIMATE:
            return feat
        return logits

    @property
    def feature_dim(self) -> int:
        if self.spec.role != "task-net":
            raise ValueError(f"role {self.spec.role!r} exposes no feature layer")
        if self.spec.options["feature_layer"] == FEATURE_PENULTIMATE:
            return self.spec.options["penultimate_dim"]
        return self.spec.options["num_classes"]

    def freeze(self) -> "ModelHandle":
        self.frozen = True
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()
        return self

    def trainable_parameters(self):
        if self.frozen:
            raise FrozenModelError(f"handle for {self.spec.role!r} is frozen")
        return list(self.module.parameters())

    def named_parameters(self) -> dict:
        return dict(self.module.named_parameters())

    def state_bytes(self) -> bytes:
        """Canonical little-endian float32 serialization of all parameters."""
        chunks = []
        for _, tensor in sorted(self.module.state_dict().items()):
            chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return b"".join(chunks)

    def clone(self, frozen: bool = False) -> "ModelHandle":
        module = build_module(self.spec)
        module.load_state_dict(copy.deepcopy(self.module.state_dict()))
        return ModelHandle(copy.deepcopy(self.spec), module, frozen=frozen)


def build_module(spec: ArchitectureSpec) -> nn.Module:
    """Compile a spec into an uninitialized module (used by load paths)."""
    _infer_shapes(spec)
    if spec.role == "task-net":
        return _TaskNet(spec)
    if spec.role == "generator":
        _validate_generator(spec)
        return _Generator(spec)
    if spec.role == "feature-discriminator":
        return _FeatureDiscriminator(spec)
    return _compile_layers(spec.layers)


def _validate_generator(spec: ArchitectureSpec) -> None:
    if spec.layers[-1].get("act") != "tanh":
        raise ValueError("generator output activation must be tanh")


def build_task_net(
    input_shape: tuple,
    num_classes: int,
    *,
    feature_layer: str = FEATURE_SCORES,
    seed: int = 0,
) -> ModelHandle:
    """LeNet-family classifier: two conv/pool blocks, fc(500), dropout, score head.

    ``feature_layer`` selects what :meth:`ModelHandle.features` returns for
    feature-level adaptation: the pre-softmax class scores (default) or the
    500-wide penultimate block.
    """
    c, h, w = input_shape
    if h < 16 or w < 16:
        raise ValueError(f"task net needs spatial dims >= 16, got {h}x{w}")
    if feature_layer not in (FEATURE_SCORES, FEATURE_PENULTIMATE):
        raise ValueError(f"unknown feature layer {feature_layer!r}")
    h1, w1 = _conv_out(h, 5, 1, 0) // 2, _conv_out(w, 5, 1, 0) // 2
    h2, w2 = _conv_out(h1, 5, 1, 0) // 2, _conv_out(w1, 5, 1, 0) // 2
    flat = 50 * h2 * w2
    layers = [
        {"kind": "conv", "in": c, "out": 20, "kernel": 5, "stride": 1, "padding": 0, "act": "relu"},
        {"kind": "maxpool", "kernel": 2},
        {"kind": "conv", "in": 20, "out": 50, "kernel": 5, "stride": 1, "padding": 0, "act": "relu"},
        {"kind": "maxpool", "kernel": 2},
        {"kind": "flatten"},
        {"kind": "fc", "in": flat, "out": 500, "act": "relu"},
        {"kind": "dropout", "p": 0.5},
        {"kind": "fc", "in": 500, "out": num_classes},
    ]
    spec = ArchitectureSpec(
        role="task-net",
        input_shape=input_shape,
        layers=layers,
        options={
            "num_classes": num_classes,
            "feature_tap": 6,
            "feature_layer": feature_layer,
            "penultimate_dim": 500,
        },
    )
    module = build_module(spec)
    _seeded_init(module, spec, seed)
    return ModelHandle(spec, module)


def build_generator(
    channels: int,
    image_size: int,
    *,
    base_width: int = 32,
    identity_debug: bool = False,
    seed: int = 0,
) -> ModelHandle:
    """Translator: stride-2 downsampling, two residual blocks, mirrored deconvs, tanh out."""
    if image_size % 4 != 0:
        raise ValueError(f"image size must be a multiple of 4, got {image_size}")
    w = base_width
    layers = [
        {"kind": "conv", "in": channels, "out": w, "kernel": 7, "stride": 1, "padding": 3,
         "norm": "instance", "act": "relu"},
        {"kind": "conv", "in": w, "out": 2 * w, "kernel": 3, "stride": 2, "padding": 1,
         "norm": "instance", "act": "relu"},
        {"kind": "conv", "in": 2 * w, "out": 4 * w, "kernel": 3, "stride": 2, "padding": 1,
         "norm": "instance", "act": "relu"},
        {"kind": "residual", "channels": 4 * w},
        {"kind": "residual", "channels": 4 * w},
        {"kind": "deconv", "in": 4 * w, "out": 2 * w, "kernel": 3, "stride": 2, "padding": 1,
         "output_padding": 1, "norm": "instance", "act": "relu"},
        {"kind": "deconv", "in": 2 * w, "out": w, "kernel": 3, "stride": 2, "padding": 1,
         "output_padding": 1, "norm": "instance", "act": "relu"},
        {"kind": "conv", "in": w, "out": channels, "kernel": 7, "stride": 1, "padding": 3,
         "act": "tanh"},
    ]
    spec = ArchitectureSpec(
        role="generator",
        input_shape=(channels, image_size, image_size),
        layers=layers,
        options={"identity_debug": identity_debug},
    )
    module = build_module(spec)
    _seeded_init(module, spec, seed)
    return ModelHandle(spec, module)


def build_image_discriminator(
    channels: int, *, base_width: int = 64, image_size: int = 32, seed: int = 0
) -> ModelHandle:
    """Patch discriminator: six convs, stride 2 on the first four, one score per cell.

    No normalization on the first layer; instance norm elsewhere except on
    maps that have collapsed to a single cell (normalizing one element is
    degenerate).
    """
    w = base_width
    plan = [
        (channels, w, 4, 2, False),
        (w, 2 * w, 4, 2, True),
        (2 * w, 4 * w, 4, 2, True),
        (4 * w, 4 * w, 4, 2, True),
        (4 * w, 4 * w, 3, 1, True),
    ]
    layers = []
    size = image_size
    for c_in, c_out, kernel, stride, want_norm in plan:
        size = _conv_out(size, kernel, stride, 1)
        layer = {"kind": "conv", "in": c_in, "out": c_out, "kernel": kernel,
                 "stride": stride, "padding": 1, "act": "lrelu"}
        if want_norm and size > 1:
            layer["norm"] = "instance"
        layers.append(layer)
    layers.append({"kind": "conv", "in": 4 * w, "out": 1, "kernel": 3, "stride": 1,
                   "padding": 1})
    spec = ArchitectureSpec(
        role="image-discriminator",
        input_shape=(channels, image_size, image_size),
        layers=layers,
    )
    module = build_module(spec)
    _seeded_init(module, spec, seed)
    return ModelHandle(spec, module)


def build_feature_discriminator(
    feature_dim: int, *, hidden: int = 500, seed: int = 0
) -> ModelHandle:
    """Three fully connected layers mapping (B, feature_dim) features to (B,) scores."""
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    layers = [
        {"kind": "fc", "in": feature_dim, "out": hidden, "act": "relu"},
        {"kind": "fc", "in": hidden, "out": hidden, "act": "relu"},
        {"kind": "fc", "in": hidden, "out": 1},
    ]
    spec = ArchitectureSpec(
        role="feature-discriminator",
        input_shape=(feature_dim,),
        layers=layers,
    )
    module = build_module(spec)
    _seeded_init(module, spec, seed)
    return ModelHandle(spec, module)


def build_toy_seg_net(input_shape: tuple, num_classes: int, *, seed: int = 0) -> ModelHandle:
    """Small fully convolutional net emitting per-pixel class scores (B, K, H, W)."""
    c = input_shape[0]
    layers = [
        {"kind": "conv", "in": c, "out": 16, "kernel": 3, "stride": 1, "padding": 1,
         "act": "relu"},
        {"kind": "conv", "in": 16, "out": 32, "kernel": 3, "stride": 1, "padding": 1,
         "act": "relu"},
        {"kind": "conv", "in": 32, "out": num_classes, "kernel": 1, "stride": 1, "padding": 0},
    ]
    spec = ArchitectureSpec(
        role="toy-seg-net",
        input_shape=input_shape,
        layers=layers,
        options={"num_classes": num_classes},
    )
    module = build_module(spec)
    _seeded_init(module, spec, seed)
    return ModelHandle(spec, module)


def save_checkpoint(handle: ModelHandle, path) -> None:
    """Write a self-contained archive: version tag, spec text, raw float32 tensors.

    Tensors are stored little-endian in state-dict key order with a sha256
    checksum over the payload, so a load can verify integrity before
    touching any weights.
    """
    entries = []
    payload = io.BytesIO()
    offset = 0
    for name, tensor in sorted(handle.module.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        payload.write(raw)
        offset += len(raw)
    blob = payload.getvalue()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": handle.spec.to_dict(),
        "frozen": handle.frozen,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        zf.writestr("payload.bin", blob)


def checkpoint_hash(path) -> str:
    """Content hash of a checkpoint's tensor payload (used as a cache key)."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    return meta["payload_sha256"]


def load_checkpoint(path) -> ModelHandle:
    """Rebuild a handle from :func:`save_checkpoint` output, verifying integrity."""
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "meta.json" not in names or "payload.bin" not in names:
                raise IntegrityError(f"checkpoint {path} is missing required members")
            meta = json.loads(zf.read("meta.json"))
            blob = zf.read("payload.bin")
    except zipfile.BadZipFile as exc:
        raise IntegrityError(f"checkpoint {path} is not a readable archive: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"checkpoint {path} has corrupt metadata: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported checkpoint format version {meta.get('format_version')!r}"
        )
    if hashlib.sha256(blob).hexdigest() != meta["payload_sha256"]:
        raise IntegrityError(f"checkpoint {path} failed its payload checksum")
    spec = ArchitectureSpec.from_dict(meta["spec"])
    module = build_module(spec)
    state = {}
    for entry in meta["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise IntegrityError(f"checkpoint {path} payload is truncated")
        arr = np.frombuffer(blob[start : start + n], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise IntegrityError(f"checkpoint {path} tensors do not match its spec: {exc}") from exc
    return ModelHandle(spec, module, frozen=bool(meta.get("frozen", False)))
