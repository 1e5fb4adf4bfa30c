"""Two-stream, multi-person network built from CAG and VAG blocks."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .blocks import CAG, VAG, check_groups
from .errors import ConfigurationError, InputError, ShapeError
from .layers import Conv2d, Dropout, Linear, Module, maxpool2d, softmax
from .tensor import Tensor4, concat, maxout, no_grad, permute, reduce_mean, relu, reshape, temporal_diff

HIDDEN = 64
MAPPED = 32
TAIL = 64
FUSED = 128
TOP = 256


@dataclass
class ModelConfig:
    coords: int = 3
    frames: int = 64
    joints: int = 25
    classes: int = 60
    max_persons: int = 2
    n_cag: int = 10
    n_vag: int = 6
    dropout: float = 0.5
    grouped: int = 30

    def __post_init__(self):
        if self.coords < 1 or self.joints < 1 or self.classes < 1 or self.max_persons < 1:
            raise ConfigurationError("coords, joints, classes and max_persons must be positive")
        if self.frames < 2:
            raise ConfigurationError("need at least 2 frames for the motion stream")
        check_groups(self.grouped, self.n_cag)
        check_groups(self.grouped, self.n_vag)
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")

    @property
    def final_width(self):
        # four ceil-mode 2x pools on the mapped-coordinate axis
        w = MAPPED
        for _ in range(4):
            w = -(-w // 2)
        return w

    @property
    def flat_features(self):
        return TOP * self.final_width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def motion_stream(x):
    """Frame-to-frame difference along T for ``(M, C, T, V)``; last frame zero."""
    if not isinstance(x, Tensor4):
        x = Tensor4(np.asarray(x, dtype=np.float32))
    return temporal_diff(x, axis=2)


class Stream(Module):
    """CAG -> swap joints into channels -> VAG."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        self.cag = CAG(config.coords, HIDDEN, config.grouped, MAPPED, config.n_cag, rng=rng, dtype=dtype)
        self.vag = VAG(config.joints, config.grouped, MAPPED, TAIL, config.n_vag, rng=rng, dtype=dtype)

    def forward(self, x, trace=None):
        h = self.cag(x, trace)
        h = permute(h, (0, 3, 2, 1))
        if trace is not None:
            trace.append(("transpose", h.dims))
        return self.vag(h, trace)


class TaCNN(Module):
    def __init__(self, config=None, seed=0, dtype=np.float32):
        super().__init__()
        config = ModelConfig() if config is None else config
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        self.skeleton = Stream(config, rng, dtype)
        self.motion = Stream(config, rng, dtype)
        self.drop_concat = Dropout(config.dropout, np.random.default_rng([seed, 1]))
        self.conv1 = Conv2d(2 * TAIL, FUSED, 3, padding=1, rng=rng, dtype=dtype)
        self.drop_conv = Dropout(config.dropout, np.random.default_rng([seed, 2]))
        self.conv2 = Conv2d(FUSED, TOP, 3, padding=1, rng=rng, dtype=dtype)
        self.drop_fc = Dropout(config.dropout, np.random.default_rng([seed, 3]))
        self.fc = Linear(config.flat_features, config.classes, rng=rng, dtype=dtype)

    def astype(self, dtype):
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    # -- per-person trunk -----------------------------------------------------

    def features(self, x, trace=None):
        """Per-person features: ``(P, C, T, V)`` -> ``(P, 256, 1, W)``."""
        c = self.config
        if x.dims[1:] != (c.coords, x.dims[2], c.joints):
            raise ShapeError(f"expected (P, {c.coords}, T, {c.joints}), got {x.dims}")
        if trace is not None:
            trace.append(("input", x.dims))
        skel = self.skeleton(x, trace)
        mot = self.motion(motion_stream(x), None)
        h = self.drop_concat(concat([skel, mot], axis=1))
        if trace is not None:
            trace.append(("concat", h.dims))
        h = self.drop_conv(relu(maxpool2d(self.conv1(h), ceil_mode=True)))
        if trace is not None:
            trace.append(("conv1", h.dims))
        h = relu(maxpool2d(self.conv2(h), ceil_mode=True))
        if trace is not None:
            trace.append(("conv2", h.dims))
        h = reduce_mean(h, 2)
        if trace is not None:
            trace.append(("mean", h.dims))
        return h

    def forward_person(self, x):
        if x.dims[0] != 1:
            raise ShapeError("forward_person takes a single person")
        return self.features(x)

    # -- sample level -----------------------------------------------------------

    def _stack(self, samples):
        arrays, counts = [], []
        for persons in samples:
            arr = persons.data if isinstance(persons, Tensor4) else np.asarray(persons)
            if arr.ndim == 3:
                arr = arr[None]
            if arr.shape[0] < 1:
                raise InputError("sample has zero persons")
            if arr.shape[0] > self.config.max_persons:
                raise InputError(f"{arr.shape[0]} persons exceeds max_persons={self.config.max_persons}")
            arrays.append(arr)
            counts.append(arr.shape[0])
        if not arrays:
            raise InputError("empty batch")
        return Tensor4(np.concatenate(arrays).astype(self.dtype, copy=False)), counts

    def forward_batch(self, samples, trace=None, x=None, counts=None):
        """Logits ``(B, K, 1, 1)`` for a list of ``(M', C, T, V)`` person arrays.

        Alternatively pass a stacked person tensor ``x`` with per-sample
        ``counts`` (used when gradients w.r.t. the input are wanted).
        """
        if x is None:
            x, counts = self._stack(samples)
        feats = self.features(x, trace)
        fused = maxout(feats, counts)
        if trace is not None:
            trace.append(("maxout", fused.dims))
        flat = reshape(fused, (fused.dims[0], self.config.flat_features, 1, 1))
        logits = self.fc(self.drop_fc(flat))
        if trace is not None:
            trace.append(("fc", logits.dims))
        return logits

    def forward(self, persons, trace=None):
        """Logits ``(1, K, 1, 1)`` for one sample given as a list of persons."""
        if isinstance(persons, (list, tuple)):
            if not persons:
                raise InputError("sample has zero persons")
            persons = np.stack([p.data[0] if isinstance(p, Tensor4) else np.asarray(p) for p in persons])
        return self.forward_batch([persons], trace)

    def predict_logits(self, samples, batch_size=64):
        """Eval-mode logits as an ``(N, K)`` array (mode restored afterwards)."""
        was = self.training
        self.eval()
        out = []
        try:
            with no_grad():
                for i in range(0, len(samples), batch_size):
                    chunk = [getattr(s, "data", s) for s in samples[i:i + batch_size]]
                    out.append(self.forward_batch(chunk).data.reshape(len(chunk), -1))
        finally:
            self.train(was)
        if not out:
            return np.zeros((0, self.config.classes), dtype=self.dtype)
        return np.concatenate(out)

    def predict_proba(self, samples, batch_size=64):
        return softmax(self.predict_logits(samples, batch_size).astype(np.float64))


def ensemble_predict(models, sample):
    """Average of per-model softmax probabilities (score-level fusion)."""
    if not models:
        raise ConfigurationError("empty ensemble")
    ref = models[0].config
    for m in models[1:]:
        c = m.config
        if (c.coords, c.frames, c.joints, c.classes) != (ref.coords, ref.frames, ref.joints, ref.classes):
            raise ConfigurationError("ensemble members disagree on (C, T, V, K)")
    samples = sample if isinstance(sample, list) else [sample]
    probs = np.mean([m.predict_proba(samples) for m in models], axis=0)
    return probs if isinstance(sample, list) else probs[0]


def export_attention(model, dataset):
    """Per-class mean SE gates for the skeleton stream's CAG and VAG blocks.

    Gates of a multi-person sample are averaged over its persons first.
    Returns rows ``(block, channel, class, mean_gate)`` sorted by block,
    class, then channel.
    """
    if not dataset:
        raise InputError("attention export needs at least one sample")
    was = model.training
    model.eval()
    blocks = {"cag": model.skeleton.cag.se, "vag": model.skeleton.vag.se}
    sums, counts = {}, {}
    try:
        with no_grad():
            for s in dataset:
                model.forward_batch([s.data])
                k = s.target
                counts[k] = counts.get(k, 0) + 1
                for name, se in blocks.items():
                    g = se.last_gate.astype(np.float64).mean(axis=0)
                    key = (name, k)
                    sums[key] = sums[key] + g if key in sums else g
    finally:
        model.train(was)
    rows = []
    for name in blocks:
        for k in sorted(counts):
            mean = sums[(name, k)] / counts[k]
            rows.extend((name, ch, k, float(v)) for ch, v in enumerate(mean))
    return rows


def attention_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "channel", "class", "mean_gate"])
    for block, ch, k, v in rows:
        w.writerow([block, ch, k, repr(v)])
    return buf.getvalue()
