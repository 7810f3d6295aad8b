"""MLP and MLP-Mixer lifting networks, inpainting, and checkpoints.

Both networks map a batch of keypoint tokens ``(x, y, v)`` with shape
``(B, K, 3)`` to a raw 3D prediction of the same shape. :func:`inpaint` then
keeps the observed screen coordinates and uses the prediction only where
information is missing.
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, ParseError

FAMILIES = ("mlp", "mixer")


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``depth`` counts width-by-width hidden layers for the MLP (there is
    always one extra input projection) and mixer blocks for the MLP-Mixer.
    ``width`` is the hidden width of the MLP or the token size of the mixer.
    ``expansion`` is the hidden multiplier of the two-layer MLPs inside each
    mixer block.
    """

    family: str = "mixer"
    depth: int = 8
    width: int = 8
    keypoints: int = 60
    seed: int = 0
    expansion: int = 2

    def validate(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.depth < 1:
            raise InvalidInputError("depth must be >= 1")
        if self.width < 1 or self.expansion < 1:
            raise InvalidInputError("width and expansion must be >= 1")
        if self.keypoints < 4:
            raise InvalidInputError("need at least 4 keypoints")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known).validate()


@dataclass
class Parameters:
    """Named learnable tensors plus batch-norm states."""

    tensors: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)

    def learnable(self):
        """(name, tensor) pairs in a fixed order, batch-norm affine terms included."""
        out = list(self.tensors.items())
        for name, bn in self.norms.items():
            out.append((f"{name}.scale", bn.scale))
            out.append((f"{name}.shift", bn.shift))
        return out

    def buffers(self):
        out = []
        for name, bn in self.norms.items():
            out.append((f"{name}.running_mean", bn.running_mean))
            out.append((f"{name}.running_var", bn.running_var))
        return out

    def set_buffer(self, name, value):
        prefix, _, stat = name.rpartition(".")
        setattr(self.norms[prefix], stat, np.array(value, dtype=np.float64))

    def count(self):
        return int(sum(t.size for _, t in self.learnable()))

    def shapes(self):
        return {name: tuple(t.shape) for name, t in self.learnable()}

    def zero_grad(self):
        for _, t in self.learnable():
            t.grad = None


class LiftingModel:
    """Common interface of the two network families."""

    def __init__(self, config):
        self.config = config.validate()
        self.params = Parameters()
        self._rng = np.random.default_rng(config.seed)

    # -- construction helpers --------------------------------------------
    def _linear(self, name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        w = self._rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = self._rng.uniform(-bound, bound, size=fan_out)
        self.params.tensors[f"{name}.weight"] = ad.Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.params.tensors[f"{name}.bias"] = ad.Tensor(b, requires_grad=True, name=f"{name}.bias")

    def _norm(self, name, features):
        self.params.norms[name] = ad.BatchNormState(features)

    def _apply_linear(self, name, x):
        w = self.params.tensors[f"{name}.weight"]
        b = self.params.tensors[f"{name}.bias"]
        return ad.linear(x, w, b)

    def _apply_norm(self, name, x, train):
        return ad.batchnorm(x, self.params.norms[name], train=train)

    def forward(self, tokens, train=True):
        raise NotImplementedError

    def __call__(self, tokens, train=True):
        tokens = ad.as_tensor(tokens)
        k = self.config.keypoints
        if tokens.ndim != 3 or tokens.shape[1:] != (k, 3):
            raise InvalidInputError(f"expected input of shape (B, {k}, 3), got {tokens.shape}")
        return self.forward(tokens, train)

    def parameter_count(self):
        return self.params.count()


class MLPLifter(LiftingModel):
    """Flatten to 3K, ``depth + 1`` BatchNorm-ReLU hidden layers, project back to 3K."""

    def __init__(self, config):
        super().__init__(config)
        if config.family != "mlp":
            raise InvalidInputError("MLPLifter needs family='mlp'")
        k3 = 3 * config.keypoints
        width = config.width
        self._linear("mlp.in", k3, width)
        self._norm("mlp.in_bn", width)
        for i in range(config.depth):
            self._linear(f"mlp.hidden{i}", width, width)
            self._norm(f"mlp.hidden{i}_bn", width)
        self._linear("mlp.out", width, k3)

    def forward(self, tokens, train=True):
        b = tokens.shape[0]
        k = self.config.keypoints
        h = ad.reshape(tokens, (b, 3 * k))
        h = ad.relu(self._apply_norm("mlp.in_bn", self._apply_linear("mlp.in", h), train))
        for i in range(self.config.depth):
            h = self._apply_linear(f"mlp.hidden{i}", h)
            h = ad.relu(self._apply_norm(f"mlp.hidden{i}_bn", h, train))
        out = self._apply_linear("mlp.out", h)
        return ad.reshape(out, (b, k, 3))


class MixerLifter(LiftingModel):
    """Shared 3->n token embedding, ``depth`` mixer blocks, shared n->3 head.

    Each block applies a residual token-mixing MLP across the keypoint axis
    (on the transposed hidden state) followed by a residual channel-mixing
    MLP across the token axis. Each MLP is linear, BatchNorm, ReLU, linear.
    """

    def __init__(self, config):
        super().__init__(config)
        if config.family != "mixer":
            raise InvalidInputError("MixerLifter needs family='mixer'")
        k, n, e = config.keypoints, config.width, config.expansion
        self._linear("embed", 3, n)
        for i in range(config.depth):
            self._linear(f"block{i}.token.fc1", k, e * k)
            self._norm(f"block{i}.token.bn", e * k)
            self._linear(f"block{i}.token.fc2", e * k, k)
            self._linear(f"block{i}.channel.fc1", n, e * n)
            self._norm(f"block{i}.channel.bn", e * n)
            self._linear(f"block{i}.channel.fc2", e * n, n)
        self._linear("head", n, 3)

    def _mlp(self, prefix, x, train):
        h = self._apply_linear(f"{prefix}.fc1", x)
        h = ad.relu(self._apply_norm(f"{prefix}.bn", h, train))
        return self._apply_linear(f"{prefix}.fc2", h)

    def forward(self, tokens, train=True):
        h = self._apply_linear("embed", tokens)  # (B, K, n)
        for i in range(self.config.depth):
            mixed = self._mlp(f"block{i}.token", ad.transpose(h), train)  # (B, n, K)
            h = h + ad.transpose(mixed)
            h = h + self._mlp(f"block{i}.channel", h, train)
        return self._apply_linear("head", h)


def build_model(config):
    config.validate()
    if config.family == "mlp":
        return MLPLifter(config)
    return MixerLifter(config)


def build_mlp(config):
    return MLPLifter(config)


def build_mixer(config):
    return MixerLifter(config)


# ---------------------------------------------------------------------------
# inpainting
# ---------------------------------------------------------------------------


def _check_visibility(v):
    v = np.asarray(v, dtype=np.float64)
    if not np.all((v == 0.0) | (v == 1.0)):
        raise InvalidInputError("visibility mask must be binary")
    return v


def network_input(w, v):
    """Tokens ``(x, y, v)`` per keypoint with occluded coordinates zeroed."""
    w = np.asarray(w, dtype=np.float64)
    v = _check_visibility(v)
    return np.concatenate([w * v[..., None], v[..., None]], axis=-1)


def inpaint(w, v, prediction, camera=None):
    """Merge observations into a raw prediction.

    Visible keypoints keep their observed ``(x, y)`` and take ``z`` from the
    prediction; occluded keypoints take all three coordinates from the
    prediction. Under a perspective camera ``w`` must already be in NDC, and
    the merge happens in NDC. Gradients reach ``prediction`` only through
    the entries that survive the merge.
    """
    del camera  # the merge is the same in screen and NDC coordinates
    w = np.asarray(w, dtype=np.float64)
    v = _check_visibility(v)
    prediction = ad.as_tensor(prediction)
    if w.shape[:-1] != v.shape or prediction.shape != v.shape + (3,):
        raise InvalidInputError(
            f"shape mismatch: w {w.shape}, v {v.shape}, prediction {prediction.shape}"
        )
    hidden = 1.0 - v
    keep = np.stack([hidden, hidden, np.ones_like(v)], axis=-1)
    observed = np.concatenate([w * v[..., None], np.zeros(v.shape + (1,))], axis=-1)
    return prediction * keep + observed


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SLCKPT\x00\x01"


def save_checkpoint(path, config, arrays, step=0, meta=None):
    """Write a checkpoint.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then every array's float64 little-endian bytes back to back in
    header order. The header holds ``config``, ``step``, ``meta`` and an
    ``entries`` list of ``{name, shape, offset}`` with byte offsets relative
    to the start of the data block. The file is written atomically.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "subsetlift-checkpoint",
        "version": 1,
        "config": asdict(config),
        "step": int(step),
        "meta": meta or {},
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(config, arrays, step, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a subsetlift checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    return config, arrays, header["step"], header.get("meta", {})


def model_arrays(model):
    arrays = {f"param/{name}": t.value for name, t in model.params.learnable()}
    arrays.update({f"buffer/{name}": v for name, v in model.params.buffers()})
    return arrays


def restore_model(config, arrays):
    """Rebuild a model and overwrite its state from checkpoint arrays."""
    model = build_model(config)
    for name, t in model.params.learnable():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != t.shape:
            raise ParseError(f"checkpoint is missing or mis-shapes {key}")
        t.value = arrays[key].copy()
    for name, _ in model.params.buffers():
        model.params.set_buffer(name, arrays[f"buffer/{name}"])
    return model


def save_model(path, model, step=0, meta=None):
    save_checkpoint(path, model.config, model_arrays(model), step=step, meta=meta)


def load_model(path):
    config, arrays, step, meta = load_checkpoint(path)
    return restore_model(config, arrays), step, meta
