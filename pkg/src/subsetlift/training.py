"""Batch-gradient training: Adam, adaptive gradient clipping, checkpoints."""
import csv
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as dio
from . import models
from .errors import InvalidBatchError, InvalidInputError, NumericFailureError, ParseError, TrainingHalted
from .occlusion import occlusion_terms
from .subset_loss import SubsetLossConfig, batch_subset_loss

DEFAULT_LR = {"mixer": 1e-3, "mlp": 1e-4}
SEQUENCE_LR = 1e-5
AGC_FLOOR = 1e-3
METRICS_HEADER = ["step", "subset_loss", "occlusion_loss", "unclamped_cosine", "wall_time"]


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    ``learning_rate=None`` picks 1e-3 for mixers, 1e-4 for MLPs and 1e-5 in
    sequence mode. In sequence mode every step uses the whole dataset as one
    batch and ``batch_size`` is ignored.
    """

    learning_rate: float = None
    batch_size: int = 128
    steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    agc_lambda: float = 0.1
    seed: int = 0
    sequence_mode: bool = False
    occlusion_weight: float = 1.0
    augment_rotation: bool = False
    checkpoint_every: int = 1000

    def resolved_lr(self, family):
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return SEQUENCE_LR if self.sequence_mode else DEFAULT_LR[family]

    def validate(self):
        if self.learning_rate is not None and not (self.learning_rate >= 0 and np.isfinite(self.learning_rate)):
            raise InvalidInputError("learning rate must be finite and non-negative")
        if not self.sequence_mode and self.batch_size < 2:
            raise InvalidBatchError("batch size must be at least 2")
        if self.steps < 0:
            raise InvalidInputError("steps must be non-negative")
        if self.agc_lambda <= 0:
            raise InvalidInputError("agc_lambda must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d}).validate()


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction.

    ``params`` maps names to arrays (updated in place), ``grads`` maps the
    same names to gradients. Raises before touching anything if a gradient
    is non-finite.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericFailureError(f"non-finite gradient in {', '.join(bad)} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def agc_clip(w, g, lam=0.1):
    """Unit-wise adaptive gradient clipping.

    Units are output rows of 2-D weights (stored ``(out, in)``); vectors are a
    single unit. Each unit's gradient is rescaled so that its norm is at most
    ``lam * max(|w_unit|, 1e-3)``.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise InvalidInputError("weight and gradient shapes differ")
    if w.ndim <= 1:
        wn = max(float(np.linalg.norm(w)), AGC_FLOOR)
        gn = float(np.linalg.norm(g))
        if gn > lam * wn:
            return g * (lam * wn / gn)
        return g.copy()
    w2 = w.reshape(w.shape[0], -1)
    g2 = g.reshape(g.shape[0], -1)
    wn = np.maximum(np.linalg.norm(w2, axis=1), AGC_FLOOR)
    gn = np.linalg.norm(g2, axis=1)
    limit = lam * wn
    factor = np.where(gn > limit, limit / np.where(gn > 0, gn, 1.0), 1.0)
    return (g2 * factor[:, None]).reshape(g.shape)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: list
    checkpoint: str
    adam: AdamState
    normalization: dict


def dataset_normalization(dataset):
    """Observation transform used for training; identity under perspective."""
    if dataset.camera.is_perspective:
        return {"center": [0.0, 0.0], "scale": 1.0}
    if dataset.manifest.normalization is not None:
        return dataset.manifest.normalization
    return dio.compute_normalization(dataset.w, dataset.v)


def training_checkpoint_arrays(model, adam):
    arrays = models.model_arrays(model)
    for name, _ in model.params.learnable():
        if name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
    return arrays


def _save(path, model, adam, step, rng, train_cfg, loss_cfg, normalization):
    meta = {
        "train": asdict(train_cfg),
        "loss": asdict(loss_cfg),
        "normalization": normalization,
        "adam_step": adam.step,
        "rng_state": rng.bit_generator.state,
    }
    models.save_checkpoint(path, model.config, training_checkpoint_arrays(model, adam), step=step, meta=meta)


def load_training_state(path):
    """Return ``(model, adam, step, rng, meta)`` from a training checkpoint."""
    config, arrays, step, meta = models.load_checkpoint(path)
    if "rng_state" not in meta:
        raise ParseError(f"{path}: checkpoint carries no training state")
    model = models.restore_model(config, arrays)
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for name, _ in model.params.learnable():
        if f"adam_m/{name}" in arrays:
            adam.m[name] = arrays[f"adam_m/{name}"].copy()
            adam.v[name] = arrays[f"adam_v/{name}"].copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return model, adam, step, rng, meta


def forward_batch(model, w, v, camera, train=True):
    """Network forward plus inpainting, on normalized observations."""
    tokens = models.network_input(w, v)
    prediction = model(tokens, train=train)
    return models.inpaint(w, v, prediction, camera)


def training_losses(x, v, camera, loss_cfg, rng, occlusion_weight=1.0):
    """Return ``(total, subset, occlusion, cosine)`` for an inpainted batch."""
    points = dio.unproject_tensor(x, camera) if camera.is_perspective else x
    sub = batch_subset_loss(points, loss_cfg, rng)
    occ, cosine = occlusion_terms(v, ad.getitem(x, (Ellipsis, 2)))
    total = sub + occ * occlusion_weight if occlusion_weight else sub
    return total, sub, occ, cosine


def train(
    model,
    dataset,
    loss_cfg=None,
    train_cfg=None,
    out_dir=None,
    resume=None,
    callback=None,
):
    """Train ``model`` on ``dataset``.

    With ``out_dir`` set, metrics are appended to ``metrics.csv`` and the
    latest state is written to ``checkpoint.slc`` every
    ``checkpoint_every`` steps and at the end. ``resume`` is a checkpoint
    path whose model, optimizer and RNG state replace the current ones;
    training then continues until ``train_cfg.steps`` total steps.

    A non-finite loss or gradient raises :class:`TrainingHalted` naming the
    last checkpoint written.
    """
    loss_cfg = (loss_cfg or SubsetLossConfig()).validate(dataset.keypoints)
    train_cfg = (train_cfg or TrainConfig()).validate()
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    if model.config.keypoints != dataset.keypoints:
        raise InvalidInputError(f"model expects K={model.config.keypoints}, dataset has K={dataset.keypoints}")
    nb = len(dataset) if train_cfg.sequence_mode else train_cfg.batch_size
    if nb < 2 or nb > len(dataset):
        raise InvalidBatchError(f"batch of {nb} from a dataset of {len(dataset)}")
    if train_cfg.augment_rotation and dataset.camera.is_perspective:
        raise InvalidInputError("rotation augmentation needs an orthographic camera")

    normalization = dataset_normalization(dataset)
    w_all = dio.normalize_observations(dataset.w, dataset.v, normalization)
    v_all = dataset.v
    camera = dataset.camera
    lr = train_cfg.resolved_lr(model.config.family)

    start = 0
    adam = AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    if resume is not None:
        model, adam, start, rng, _ = load_training_state(resume)

    ckpt_path = metrics_path = None
    last_good = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.slc")
        metrics_path = os.path.join(out_dir, "metrics.csv")
        if resume is not None:
            last_good = resume
        if not os.path.exists(metrics_path) or resume is None:
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    learnable = model.params.learnable()
    history = []
    t0 = time.perf_counter()
    for step in range(start + 1, train_cfg.steps + 1):
        if train_cfg.sequence_mode:
            idx = np.arange(len(dataset))
        else:
            idx = rng.choice(len(dataset), size=nb, replace=False)
        w = w_all[idx]
        v = v_all[idx]
        if train_cfg.augment_rotation:
            w = dio.augment_batch_rotation(w, v, rng.uniform(0.0, 2.0 * np.pi, nb))
        model.params.zero_grad()
        with ad.Tape():
            x = forward_batch(model, w, v, camera, train=True)
            total, sub, occ, cosine = training_losses(x, v, camera, loss_cfg, rng, train_cfg.occlusion_weight)
            if not np.isfinite(total.value):
                raise TrainingHalted(f"non-finite loss at step {step}", step, last_good)
            ad.backward(total)
        grads = {}
        for name, t in learnable:
            g = t.grad if t.grad is not None else np.zeros_like(t.value)
            if not np.all(np.isfinite(g)):
                raise TrainingHalted(f"non-finite gradient in {name} at step {step}", step, last_good)
            grads[name] = agc_clip(t.value, g, train_cfg.agc_lambda)
        adam_step(
            {name: t.value for name, t in learnable},
            grads,
            adam,
            lr,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.adam_eps,
        )
        row = {
            "step": step,
            "subset_loss": float(sub.value),
            "occlusion_loss": float(occ.value),
            "unclamped_cosine": float(cosine),
            "wall_time": time.perf_counter() - t0,
        }
        history.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) for k in METRICS_HEADER])
        if callback is not None:
            callback(row)
        if ckpt_path is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            _save(ckpt_path, model, adam, step, rng, train_cfg, loss_cfg, normalization)
            last_good = ckpt_path
    if ckpt_path is not None:
        _save(ckpt_path, model, adam, max(start, train_cfg.steps), rng, train_cfg, loss_cfg, normalization)
    return TrainResult(model, history, ckpt_path, adam, normalization)


def predict(model, dataset, normalization=None, batch_size=512):
    """Inpainted eval-mode reconstructions in dataset coordinates, (N, K, 3).

    Visible ``(x, y)`` are copied from the observations after mapping back,
    so they match the dataset values exactly.
    """
    normalization = normalization or dataset_normalization(dataset)
    w_all = dio.normalize_observations(dataset.w, dataset.v, normalization)
    out = np.zeros((len(dataset), dataset.keypoints, 3))
    with ad.no_grad():
        for lo in range(0, len(dataset), batch_size):
            sl = slice(lo, lo + batch_size)
            x = forward_batch(model, w_all[sl], dataset.v[sl], dataset.camera, train=False)
            out[sl] = dio.denormalize_points(x.value, normalization)
    vis = dataset.v > 0
    out[..., :2][vis] = dataset.w[vis]
    return out
