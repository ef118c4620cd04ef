"""Dual-branch convolutional encoder with an action-conditioned LSTM rollout.

Ground and aerial image stacks go through separate conv branches; the
flattened feature maps are concatenated and projected to the LSTM's initial
``(h, c)``. Each future step embeds one steering action, advances the LSTM and
emits a softmax over terrain classes. The rollout factorizes the joint label
probability into a product of per-step terms.
"""

from __future__ import annotations

import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import nn
from .config import ArchConfig, ConfigError, TrainConfig, section_from_text, section_text

log = logging.getLogger(__name__)

CKPT_MAGIC = "TERRANAV-CKPT"
CKPT_VERSION = 1
MODES = ("fusion", "ground_only", "air_only")


@dataclass
class TerrainModel:
    arch: ArchConfig
    params: "OrderedDict[str, np.ndarray]"

    @property
    def uses_ground(self):
        return self.arch.mode in ("fusion", "ground_only")

    @property
    def uses_aerial(self):
        return self.arch.mode in ("fusion", "air_only")

    def copy(self):
        return TerrainModel(self.arch, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))


@dataclass
class TrainingBatch:
    ground: np.ndarray | None    # (N, Hg, Wg, 3M) in [0, 1]
    aerial: np.ndarray | None    # (N, Ha, Wa, 3M) in [0, 1]
    actions: np.ndarray          # (N, H) in [-1, 1]
    labels: np.ndarray           # (N, H) int

    def __len__(self):
        return len(self.actions)


# --------------------------------------------------------------------------- #
# architecture


def branch_shapes(arch: ArchConfig, image_shape):
    """Feature-map shapes ``(h, w, c)`` after every conv layer of one branch."""
    h, w = image_shape
    out = []
    for ch, k, s, pad in zip(arch.channels, arch.kernels, arch.strides, arch.paddings):
        h = nn.conv_output_size(h, k, s, pad)
        w = nn.conv_output_size(w, k, s, pad)
        if h < 1 or w < 1:
            raise ConfigError(f"conv chain collapses image {tuple(image_shape)} "
                              f"to a non-positive extent at kernel {k}, stride {s}")
        out.append((h, w, ch))
    return out


def validate_arch(arch: ArchConfig):
    if arch.mode not in MODES:
        raise ConfigError(f"unknown input mode {arch.mode!r}; expected one of {MODES}")
    if not (len(arch.channels) == len(arch.kernels) == len(arch.strides)
            == len(arch.paddings)) or not arch.channels:
        raise ConfigError("channels, kernels, strides and paddings must have equal, "
                          "non-zero length")
    if arch.n_classes < 2 or arch.horizon < 1 or arch.history < 1:
        raise ConfigError("need n_classes >= 2, horizon >= 1 and history >= 1")
    if not 0.0 <= arch.dropout < 1.0:
        raise ConfigError("dropout must lie in [0, 1)")
    feats = 0
    if arch.mode != "air_only":
        h, w, c = branch_shapes(arch, arch.ground_shape)[-1]
        feats += h * w * c
    if arch.mode != "ground_only":
        h, w, c = branch_shapes(arch, arch.aerial_shape)[-1]
        feats += h * w * c
    return feats


def _uniform(rng, shape, fan_in, gain):
    limit = math.sqrt(gain / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_model(arch: ArchConfig, seed: int = 0) -> TerrainModel:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    n_feats = validate_arch(arch)
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    in_ch = 3 * arch.history
    branches = []
    if arch.mode != "air_only":
        branches.append("ground")
    if arch.mode != "ground_only":
        branches.append("aerial")
    for branch in branches:
        cin = in_ch
        for i, (ch, k) in enumerate(zip(arch.channels, arch.kernels)):
            params[f"{branch}.conv{i}.w"] = _uniform(rng, (k, k, cin, ch), k * k * cin, 6.0)
            params[f"{branch}.conv{i}.b"] = np.zeros(ch)
            cin = ch
    dh, din = arch.hidden, arch.embed
    params["fuse.w"] = _uniform(rng, (n_feats, 2 * dh), n_feats, 3.0)
    params["fuse.b"] = np.zeros(2 * dh)
    params["embed.w"] = _uniform(rng, (1, din), 1, 6.0)
    params["embed.b"] = np.zeros(din)
    params["lstm.w"] = _uniform(rng, (din + dh, 4 * dh), din + dh, 3.0)
    params["lstm.b"] = np.zeros(4 * dh)
    params["head.w"] = _uniform(rng, (dh, arch.n_classes), dh, 3.0)
    params["head.b"] = np.zeros(arch.n_classes)
    return TerrainModel(arch=arch, params=params)


def weight_names(model: TerrainModel):
    return [k for k in model.params if k.endswith(".w")]


def l2_norm_sq(model: TerrainModel) -> float:
    return float(sum(np.sum(model.params[k] ** 2) for k in weight_names(model)))


# --------------------------------------------------------------------------- #
# forward / backward


def _check_images(x, shape, history, name):
    if x is None:
        raise ValueError(f"{name} images are required by this model's input mode")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    expect = (shape[0], shape[1], 3 * history)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ValueError(f"{name} stack has shape {x.shape[1:]}, expected {expect}")
    return x


def _branch_forward(model, branch, x):
    arch = model.arch
    caches = []
    for i, s in enumerate(arch.strides):
        x, cache = nn.conv2d_forward(x, model.params[f"{branch}.conv{i}.w"],
                                     model.params[f"{branch}.conv{i}.b"], stride=s,
                                     padding=arch.paddings[i], relu=True)
        caches.append(cache)
    return x.reshape(len(x), -1), (caches, x.shape)


def _branch_backward(model, branch, dflat, cache, grads):
    caches, shape = cache
    d = dflat.reshape(shape)
    for i in reversed(range(len(caches))):
        d, dw, db = nn.conv2d_backward(d, caches[i], input_grad=i > 0)
        grads[f"{branch}.conv{i}.w"] = dw
        grads[f"{branch}.conv{i}.b"] = db


def _encode_forward(model, ground, aerial, training=False, rng=None):
    arch = model.arch
    feats, caches = [], {}
    n = None
    if model.uses_ground:
        g = _check_images(ground, arch.ground_shape, arch.history, "ground")
        f, caches["ground"] = _branch_forward(model, "ground", g)
        feats.append(f)
        n = len(g)
    if model.uses_aerial:
        a = _check_images(aerial, arch.aerial_shape, arch.history, "aerial")
        if n is not None and len(a) != n:
            raise ValueError("ground and aerial batches differ in size")
        f, caches["aerial"] = _branch_forward(model, "aerial", a)
        feats.append(f)
    widths = [f.shape[1] for f in feats]
    feat = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]
    mask = None
    if training and arch.dropout > 0:
        if rng is None:
            raise ValueError("training with dropout needs an rng")
        mask = nn.dropout_mask(feat.shape, arch.dropout, rng)
        feat = feat * mask
    z, fcache = nn.dense_forward(feat, model.params["fuse.w"], model.params["fuse.b"])
    hc = np.tanh(z)
    dh = arch.hidden
    cache = (caches, widths, mask, fcache, hc)
    return hc[:, :dh], hc[:, dh:], cache


def _encode_backward(model, dh0, dc0, cache, grads):
    caches, widths, mask, fcache, hc = cache
    dz = np.concatenate([dh0, dc0], axis=1) * (1.0 - hc * hc)
    dfeat, grads["fuse.w"], grads["fuse.b"] = nn.dense_backward(dz, fcache)
    if mask is not None:
        dfeat = dfeat * mask
    start = 0
    branches = [b for b, used in (("ground", model.uses_ground), ("aerial", model.uses_aerial))
                if used]
    for branch, width in zip(branches, widths):
        _branch_backward(model, branch, dfeat[:, start:start + width], caches[branch], grads)
        start += width


def encode(model: TerrainModel, ground=None, aerial=None):
    """Initial LSTM state ``(h0, c0)`` for a batch (or a single observation)."""
    single = (ground is not None and np.ndim(ground) == 3) or \
        (aerial is not None and np.ndim(aerial) == 3)
    h0, c0, _ = _encode_forward(model, ground, aerial)
    return (h0[0], c0[0]) if single else (h0, c0)


def _rollout_forward(model, h, c, actions):
    p = model.params
    n, horizon = actions.shape
    logits = np.empty((n, horizon, model.arch.n_classes))
    caches = []
    for i in range(horizon):
        e, ecache = nn.dense_forward(actions[:, i:i + 1], p["embed.w"], p["embed.b"], relu=True)
        h, c, lcache = nn.lstm_step_forward(e, h, c, p["lstm.w"], p["lstm.b"])
        logits[:, i], hcache = nn.dense_forward(h, p["head.w"], p["head.b"])
        caches.append((ecache, lcache, hcache))
    return logits, caches


def _rollout_backward(model, dlogits, caches, grads):
    dh_total = None
    dc = None
    acc = {k: np.zeros_like(model.params[k])
           for k in ("embed.w", "embed.b", "lstm.w", "lstm.b", "head.w", "head.b")}
    for i in reversed(range(len(caches))):
        ecache, lcache, hcache = caches[i]
        dh, dw, db = nn.dense_backward(dlogits[:, i], hcache)
        acc["head.w"] += dw
        acc["head.b"] += db
        if dh_total is not None:
            dh = dh + dh_total
            dc_in = dc
        else:
            dc_in = np.zeros_like(dh)
        dx, dh_total, dc, dw, db = nn.lstm_step_backward(dh, dc_in, lcache)
        acc["lstm.w"] += dw
        acc["lstm.b"] += db
        _, dw, db = nn.dense_backward(dx, ecache)
        acc["embed.w"] += dw
        acc["embed.b"] += db
    grads.update(acc)
    return dh_total, dc


def _check_actions(actions, horizon):
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[1] != horizon:
        raise ValueError(f"action sequences must have length H={horizon}, got shape {a.shape}")
    if np.any(np.abs(a) > 1.0 + 1e-9):
        raise ValueError("steering actions must lie in [-1, 1]")
    return a


def rollout_from_state(model: TerrainModel, h0, c0, actions) -> np.ndarray:
    """Per-step class probabilities ``(K, H, C)`` for K action sequences
    starting from one or K initial states."""
    a = _check_actions(actions, model.arch.horizon)
    h0 = np.atleast_2d(h0)
    c0 = np.atleast_2d(c0)
    if len(h0) == 1 and len(a) > 1:
        h0 = np.repeat(h0, len(a), axis=0)
        c0 = np.repeat(c0, len(a), axis=0)
    logits, _ = _rollout_forward(model, h0, c0, a)
    return nn.softmax(logits)


def predict_rollout(model: TerrainModel, ground=None, aerial=None, actions=None,
                    training=False, rng=None) -> np.ndarray:
    """Class probabilities ``(H, C)`` for one observation, or ``(N, H, C)`` for a batch."""
    single = np.ndim(actions) == 1
    h0, c0, _ = _encode_forward(model, ground, aerial, training=training, rng=rng)
    a = _check_actions(actions, model.arch.horizon)
    if len(h0) == 1 and len(a) > 1:
        h0 = np.repeat(h0, len(a), axis=0)
        c0 = np.repeat(c0, len(a), axis=0)
    logits, _ = _rollout_forward(model, h0, c0, a)
    probs = nn.softmax(logits)
    return probs[0] if single else probs


def joint_probability(probs, labels) -> float:
    """Probability of a whole label sequence under per-step independence."""
    probs = np.asarray(probs)
    return float(np.prod(probs[np.arange(len(labels)), np.asarray(labels)]))


def batch_loss(model: TerrainModel, batch: TrainingBatch, l2: float = 1e-6,
               training: bool = False, rng=None, with_grads: bool = True):
    """Mean over the batch of the horizon-summed cross-entropy plus ``l2 * ||w||^2``.

    Returns ``(loss, grads)``; ``grads`` covers every parameter (None when
    ``with_grads`` is off).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    arch = model.arch
    labels = np.asarray(batch.labels)
    actions = _check_actions(batch.actions, arch.horizon)
    if labels.shape != actions.shape:
        raise ValueError(f"labels {labels.shape} and actions {actions.shape} disagree")
    h0, c0, ecache = _encode_forward(model, batch.ground, batch.aerial, training, rng)
    logits, rcache = _rollout_forward(model, h0, c0, actions)
    ce, _, dlogits = nn.softmax_cross_entropy(logits, labels)
    n = len(labels)
    loss = float(ce.sum() / n + l2 * l2_norm_sq(model))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    if not with_grads:
        return loss, None
    grads: dict[str, np.ndarray] = {}
    dh0, dc0 = _rollout_backward(model, dlogits / n, rcache, grads)
    _encode_backward(model, dh0, dc0, ecache, grads)
    for k in weight_names(model):
        grads[k] = grads[k] + 2.0 * l2 * model.params[k]
    return loss, OrderedDict((k, grads[k]) for k in model.params)


# --------------------------------------------------------------------------- #
# evaluation


def horizon_accuracy(predicted, labels):
    """Accuracy per horizon index plus short (first half) / long (second half)
    bucket means. ``predicted`` and ``labels`` are ``(N, H)`` class arrays."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape or labels.ndim != 2:
        raise ValueError("predicted and labels must both be (N, H)")
    per_step = (predicted == labels).mean(axis=0)
    half = max(1, labels.shape[1] // 2)
    return {
        "per_step": per_step,
        "short": float(per_step[:half].mean()),
        "long": float(per_step[half:].mean()) if labels.shape[1] > half else float("nan"),
    }


def predict_dataset(model: TerrainModel, dataset, batch_size=256, indices=None):
    """Probabilities ``(N, H, C)`` and labels for (a subset of) a dataset."""
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    probs, labels = [], []
    for start in range(0, len(indices), batch_size):
        batch = dataset.get_batch(indices[start:start + batch_size], model.arch.mode)
        probs.append(predict_rollout(model, batch.ground, batch.aerial, batch.actions))
        labels.append(batch.labels)
    if not probs:
        raise ValueError("empty dataset")
    return np.concatenate(probs), np.concatenate(labels)


def evaluate(model: TerrainModel, dataset, l2=0.0, indices=None, batch_size=256):
    """Mean horizon-summed cross-entropy and the horizon accuracy table."""
    probs, labels = predict_dataset(model, dataset, batch_size, indices)
    picked = np.take_along_axis(probs, labels[..., None], -1)[..., 0]
    ce = float(-np.log(np.maximum(picked, 1e-300)).sum(axis=1).mean())
    table = horizon_accuracy(probs.argmax(-1), labels)
    return {"loss": ce + l2 * l2_norm_sq(model), "cross_entropy": ce, **table}


# --------------------------------------------------------------------------- #
# training


@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_short: list = field(default_factory=list)
    val_long: list = field(default_factory=list)
    val_h1: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def train(model: TerrainModel, train_set, val_set, config: TrainConfig, seed: int = 0,
          callback=None):
    """Shuffled-minibatch Adam on the horizon cross-entropy.

    Every ``eval_every`` steps (and at step 0) the validation cross-entropy
    and horizon accuracies are recorded on a fixed subset of ``val_set``.
    Returns ``(model, TrainingLog)``; the input model is not modified.
    """
    if train_set is None or len(train_set) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = nn.Adam(learning_rate=config.learning_rate)
    history = TrainingLog()
    val_idx = None
    if val_set is not None and len(val_set):
        n_val = min(len(val_set), config.eval_samples)
        val_idx = np.sort(np.random.default_rng(seed + 1).choice(len(val_set), n_val,
                                                                 replace=False))

    def record(step_no, recent):
        history.steps.append(step_no)
        history.train_loss.append(float(np.mean(recent)) if recent else float("nan"))
        if val_idx is not None:
            ev = evaluate(model, val_set, config.l2, val_idx)
            history.val_loss.append(ev["cross_entropy"])
            history.val_short.append(ev["short"])
            history.val_long.append(ev["long"])
            history.val_h1.append(float(ev["per_step"][0]))
        if callback is not None:
            callback(step_no, history)

    record(0, [])
    order = rng.permutation(len(train_set))
    pos = 0
    recent = []
    bs = min(config.batch_size, len(train_set))
    for step_no in range(1, config.steps + 1):
        if pos + bs > len(order):
            order = rng.permutation(len(train_set))
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        batch = train_set.get_batch(idx, model.arch.mode)
        loss, grads = batch_loss(model, batch, config.l2, training=True, rng=rng)
        opt.step(model.params, grads)
        history.step_losses.append(loss)
        recent.append(loss)
        if step_no % config.eval_every == 0 or step_no == config.steps:
            record(step_no, recent)
            recent = []
    return model, history


# --------------------------------------------------------------------------- #
# checkpoints


def save_checkpoint(model: TerrainModel, path, meta: dict | None = None) -> None:
    """Text header (magic, version, architecture, metadata) then one block per
    parameter in declaration order: name, shape, little-endian float64 data."""
    head = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    for key, value in (meta or {}).items():
        head.append(f"meta.{key} = {value}")
    head.append(f"params = {len(model.params)}")
    head.append("[arch]")
    header = ("\n".join(head) + "\n" + section_text(model.arch)).encode()
    buf = io.BytesIO()
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for name, value in model.params.items():
        nb = name.encode()
        buf.write(len(nb).to_bytes(2, "little"))
        buf.write(nb)
        buf.write(value.ndim.to_bytes(1, "little"))
        for d in value.shape:
            buf.write(int(d).to_bytes(4, "little"))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        n = int.from_bytes(data[:8], "little")
        header = data[8:8 + n].decode()
        first = header.split("\n", 1)[0]
        magic, version = first.split()
    except (ValueError, UnicodeDecodeError):
        raise ValueError(f"{path}: not a checkpoint") from None
    if magic != CKPT_MAGIC or int(version) != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint ({first!r})")
    top, arch_text = header.split("[arch]\n", 1)
    kv = dict(line.split(" = ", 1) for line in top.splitlines()[1:] if " = " in line)
    arch = section_from_text(ArchConfig, arch_text)
    params = OrderedDict()
    off = 8 + n
    try:
        for _ in range(int(kv["params"])):
            ln = int.from_bytes(data[off:off + 2], "little")
            name = data[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            ndim = data[off]
            off += 1
            shape = tuple(int.from_bytes(data[off + 4 * i:off + 4 * i + 4], "little")
                          for i in range(ndim))
            off += 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(np.float64)
            off += 8 * count
    except (ValueError, KeyError):
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from None
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model = TerrainModel(arch=arch, params=params)
    expected = init_model(arch, 0)
    if list(expected.params) != list(params) or any(
            expected.params[k].shape != params[k].shape for k in params):
        raise ValueError(f"{path}: parameters do not match the stored architecture")
    meta = {key[5:]: value for key, value in kv.items() if key.startswith("meta.")}
    return model, meta


# --------------------------------------------------------------------------- #
# estimator facade


class TerrainNet(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on a trajectory dataset, ``predict_proba`` on
    ``(ground, aerial, actions)``.

    Image shapes and horizon are read from the training data; everything
    else comes from the constructor parameters.
    """

    def __init__(self, mode="fusion", n_classes=4, hidden=64, embed=16,
                 channels=(16, 32, 32, 32), kernels=(4, 3, 3, 3), strides=(2, 2, 1, 1),
                 paddings=None, dropout=0.0, learning_rate=1e-3, batch_size=32, steps=3000, l2=1e-6,
                 eval_every=250, random_state=0):
        self.mode = mode
        self.n_classes = n_classes
        self.hidden = hidden
        self.embed = embed
        self.channels = channels
        self.kernels = kernels
        self.strides = strides
        self.paddings = paddings
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.steps = steps
        self.l2 = l2
        self.eval_every = eval_every
        self.random_state = random_state

    @classmethod
    def from_configs(cls, arch: ArchConfig, train_cfg: TrainConfig, random_state=0):
        return cls(mode=arch.mode, n_classes=arch.n_classes, hidden=arch.hidden,
                   embed=arch.embed, channels=tuple(arch.channels), kernels=tuple(arch.kernels),
                   strides=tuple(arch.strides), paddings=tuple(arch.paddings),
                   dropout=arch.dropout,
                   learning_rate=train_cfg.learning_rate, batch_size=train_cfg.batch_size,
                   steps=train_cfg.steps, l2=train_cfg.l2, eval_every=train_cfg.eval_every,
                   random_state=random_state)

    def _arch_for(self, dataset):
        return ArchConfig(
            n_classes=self.n_classes, horizon=dataset.horizon, history=dataset.history,
            ground_shape=tuple(dataset.ground_shape), aerial_shape=tuple(dataset.aerial_shape),
            channels=tuple(self.channels), kernels=tuple(self.kernels),
            strides=tuple(self.strides),
            paddings=tuple(self.paddings) if self.paddings is not None
            else (0,) * len(self.channels),
            hidden=self.hidden, embed=self.embed,
            mode=self.mode, dropout=self.dropout)

    def fit(self, X, y=None, validation=None):
        if X is None or len(X) == 0:
            raise ValueError("empty training set")
        cfg = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                          l2=self.l2, steps=self.steps, eval_every=self.eval_every)
        model = init_model(self._arch_for(X), self.random_state)
        self.model_, self.history_ = train(model, X, validation, cfg, seed=self.random_state)
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, ground=None, aerial=None, actions=None):
        return predict_rollout(self.model_, ground, aerial, actions)

    def predict(self, ground=None, aerial=None, actions=None):
        return self.predict_proba(ground, aerial, actions).argmax(-1)

    def score(self, X, y=None):
        """Mean accuracy over every horizon step of a dataset."""
        probs, labels = predict_dataset(self.model_, X)
        return float((probs.argmax(-1) == labels).mean())
