"""CNN feature extractor + MLP classifier used for baseline, teacher and student.

The narrow variant reads one 2 x 1024 segment, the wide variant reads a
2 x 5120 temporal window.  Only the first convolution differs (kernel and
stride scaled by the window factor of 5) so both land on the same 256-d
latent vector, which is what makes feature-space distillation well posed.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

WINDOW_FACTOR = 5
SEGMENT_LENGTH = 1024


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int = 1
    pool: int = 2


def _default_conv_stack():
    return (
        ConvLayer(16, 64, 16, 2),
        ConvLayer(32, 3, 1, 2),
        ConvLayer(64, 3, 1, 2),
        ConvLayer(64, 3, 1, 2),
        ConvLayer(128, 3, 1, 2),
    )


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str = "narrow"
    num_classes: int = 4
    in_channels: int = 2
    segment_length: int = SEGMENT_LENGTH
    conv_stack: tuple = field(default_factory=_default_conv_stack)
    mlp_hidden: tuple = (128, 64)

    def __post_init__(self):
        if self.variant not in ("narrow", "wide"):
            raise ArchitectureError(f"unknown variant {self.variant!r}; expected 'narrow' or 'wide'")
        if len(self.conv_stack) != 5:
            raise ArchitectureError(f"expected exactly 5 conv layers, got {len(self.conv_stack)}")
        if self.num_classes < 2:
            raise ArchitectureError("num_classes must be >= 2")

    @property
    def in_length(self):
        return self.segment_length * (WINDOW_FACTOR if self.variant == "wide" else 1)

    def layers(self):
        """Conv layers as actually built; the wide variant scales layer 1."""
        first, rest = self.conv_stack[0], self.conv_stack[1:]
        if self.variant == "wide":
            first = replace(first, kernel=first.kernel * WINDOW_FACTOR, stride=first.stride * WINDOW_FACTOR)
        return (first,) + tuple(rest)

    def temporal_lengths(self):
        lengths = [self.in_length]
        length = self.in_length
        for layer in self.layers():
            length = -(-length // layer.stride)
            if layer.pool > 1:
                length = -(-length // layer.pool)
            lengths.append(length)
        return lengths

    @property
    def latent_dim(self):
        return self.temporal_lengths()[-1] * self.layers()[-1].out_channels

    def as_variant(self, variant):
        return replace(self, variant=variant)

    def to_dict(self):
        d = asdict(self)
        d["conv_stack"] = [asdict(c) for c in self.conv_stack]
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_stack"] = tuple(ConvLayer(**c) for c in d["conv_stack"])
        d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


class InputLengthError(ValueError):
    pass


class Model:
    """Feature extractor ``fe_params`` followed by classifier ``clf_params``."""

    def __init__(self, spec: ArchitectureSpec, fe_params, clf_params, rng_seed=0):
        self.spec = spec
        self.fe_params = fe_params
        self.clf_params = clf_params
        self.rng_seed = rng_seed
        self.provenance = {}

    @property
    def variant(self):
        return self.spec.variant

    @property
    def latent_dim(self):
        return self.spec.latent_dim

    def parameters(self):
        return list(self.fe_params.values()) + list(self.clf_params.values())

    def named_parameters(self):
        return {**self.fe_params, **self.clf_params}

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def astype(self, dtype):
        """Independent copy with all parameters cast to ``dtype``."""
        fe = {k: Parameter(k, p.data.astype(dtype)) for k, p in self.fe_params.items()}
        clf = {k: Parameter(k, p.data.astype(dtype)) for k, p in self.clf_params.items()}
        return Model(self.spec, fe, clf, self.rng_seed)

    def copy(self):
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.fe_params.values())).dtype

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def _check_batch(self, batch):
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim != 3 or data.shape[1] != self.spec.in_channels or data.shape[2] != self.spec.in_length:
            raise InputLengthError(
                f"{self.variant} model expects batches of shape [B, {self.spec.in_channels}, "
                f"{self.spec.in_length}], got {tuple(data.shape)}")
        if isinstance(batch, Tensor):
            return batch
        return Tensor(data.astype(self.dtype, copy=False))

    def features(self, batch) -> Tensor:
        x = self._check_batch(batch)
        for i, layer in enumerate(self.spec.layers(), start=1):
            w, b = self.fe_params[f"conv{i}.weight"], self.fe_params[f"conv{i}.bias"]
            x = ad.relu(ad.conv1d(x, w, b, stride=layer.stride, padding="same"))
            if layer.pool > 1:
                x = ad.max_pool1d(x, layer.pool)
        return ad.flatten(x)

    def classify_features(self, z: Tensor) -> Tensor:
        n = len(self.spec.mlp_hidden) + 1
        for i in range(1, n + 1):
            z = ad.linear(z, self.clf_params[f"fc{i}.weight"], self.clf_params[f"fc{i}.bias"])
            if i < n:
                z = ad.relu(z)
        return z

    def logits(self, batch) -> Tensor:
        return self.classify_features(self.features(batch))


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias_uniform(rng, n, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(dtype)


def build_model(variant="narrow", num_classes=4, seed=0, spec: ArchitectureSpec | None = None,
                dtype=np.float32) -> Model:
    """Seeded He-uniform initialisation of a narrow (segment) or wide (window) model."""
    if spec is None:
        spec = ArchitectureSpec(variant=variant, num_classes=num_classes)
    else:
        spec = replace(spec, variant=variant, num_classes=num_classes)
    other = spec.as_variant("wide" if spec.variant == "narrow" else "narrow")
    if spec.latent_dim != other.latent_dim:
        raise ArchitectureError(
            f"latent dims differ between variants: {spec.variant}={spec.latent_dim}, "
            f"{other.variant}={other.latent_dim}")
    rng = np.random.default_rng(seed)
    fe, clf = {}, {}
    in_ch = spec.in_channels
    for i, layer in enumerate(spec.layers(), start=1):
        fan_in = in_ch * layer.kernel
        fe[f"conv{i}.weight"] = Parameter(
            f"conv{i}.weight", _he_uniform(rng, (layer.out_channels, in_ch, layer.kernel), fan_in, dtype))
        fe[f"conv{i}.bias"] = Parameter(f"conv{i}.bias", _bias_uniform(rng, layer.out_channels, fan_in, dtype))
        in_ch = layer.out_channels
    sizes = [spec.latent_dim, *spec.mlp_hidden, spec.num_classes]
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        clf[f"fc{i}.weight"] = Parameter(f"fc{i}.weight", _he_uniform(rng, (fo, fi), fi, dtype))
        clf[f"fc{i}.bias"] = Parameter(f"fc{i}.bias", _bias_uniform(rng, fo, fi, dtype))
    return Model(spec, fe, clf, rng_seed=seed)


def _batched(fn, data, batch_size):
    data = np.asarray(data)
    outs = [fn(data[i:i + batch_size]) for i in range(0, len(data), batch_size)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def forward_features(model: Model, batch, batch_size=256) -> np.ndarray:
    """Latent vectors [B, latent_dim] for a batch of raw inputs (no graph kept)."""
    model._check_batch(np.asarray(batch)[:1] if len(batch) else np.zeros((1, model.spec.in_channels, model.spec.in_length)))
    if len(batch) == 0:
        return np.zeros((0, model.latent_dim), dtype=model.dtype)
    return _batched(lambda b: model.features(b).data, batch, batch_size)


def forward_classify(model: Model, batch, batch_size=256):
    """Return (logits, probabilities) as arrays."""
    if len(batch) == 0:
        model._check_batch(np.zeros((1, model.spec.in_channels, model.spec.in_length)))
        return np.zeros((0, model.spec.num_classes), model.dtype), np.zeros((0, model.spec.num_classes))
    logits = _batched(lambda b: model.logits(b).data, batch, batch_size)
    return logits, ad.softmax(logits)


# --------------------------------------------------------------------------
# checkpoints
#
# layout: b"TMKD" | u32 LE manifest length | UTF-8 JSON manifest | float32 blocks

CHECKPOINT_MAGIC = b"TMKD"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class VariantMismatchError(CheckpointError):
    pass


def save_checkpoint(model: Model, path, provenance=None):
    path = Path(path)
    tensors, blocks, offset = [], [], 0
    for group, params in (("fe", model.fe_params), ("clf", model.clf_params)):
        for name, p in params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            tensors.append({"name": name, "group": group, "shape": list(p.shape),
                            "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            blocks.append(raw)
            offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "rng_seed": int(model.rng_seed),
        "provenance": dict(provenance if provenance is not None else model.provenance),
        "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blocks:
            fh.write(raw)
    return path


def load_checkpoint(path, expect_variant=None) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointTruncatedError(f"{path}: manifest needs {hlen} bytes, file has {len(raw) - 8}")
    try:
        manifest = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version}, this build reads {CHECKPOINT_VERSION}")
    spec = ArchitectureSpec.from_dict(manifest["spec"])
    if expect_variant is not None and spec.variant != expect_variant:
        raise VariantMismatchError(f"{path}: checkpoint holds a {spec.variant} model, {expect_variant} expected")
    body = raw[8 + hlen:]
    expected = build_model(spec.variant, spec.num_classes, seed=0, spec=spec)
    shapes = {k: p.shape for k, p in expected.named_parameters().items()}
    need = sum(t["nbytes"] for t in manifest["tensors"])
    if len(body) < need:
        raise CheckpointTruncatedError(f"{path}: tensor blocks need {need} bytes, file has {len(body)}")
    fe, clf = {}, {}
    for t in manifest["tensors"]:
        name = t["name"]
        if name not in shapes:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r} for {spec.variant} spec")
        if tuple(t["shape"]) != shapes[name]:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {tuple(t['shape'])}, "
                                       f"spec requires {shapes[name]}")
        block = body[t["offset"]:t["offset"] + t["nbytes"]]
        if zlib.crc32(block) != t["crc32"]:
            raise CheckpointChecksumError(f"{path}: CRC32 mismatch in tensor {name!r}")
        arr = np.frombuffer(block, dtype="<f4").reshape(t["shape"]).astype(np.float32)
        (fe if t["group"] == "fe" else clf)[name] = Parameter(name, arr)
    missing = set(shapes) - set(fe) - set(clf)
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensors {sorted(missing)}")
    fe = {k: fe[k] for k in expected.fe_params}
    clf = {k: clf[k] for k in expected.clf_params}
    model = Model(spec, fe, clf, rng_seed=manifest.get("rng_seed", 0))
    model.provenance = manifest.get("provenance", {})
    return model
