"""Skeleton samples, NTU text parsing, preprocessing and on-disk stores."""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, ParseError

SKB1_MAGIC = b"SKB1"
SKB1_VERSION = 1

# 0-based parent of each joint in the 25-joint Kinect v2 layout; the spine
# shoulder (joint 20) is its own parent, so its bone is zero.
NTU_PARENTS = (1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18,
               20, 22, 7, 24, 11)


@dataclass
class SkeletonSample:
    """One labeled clip: ``data`` is ``(persons, C, T, V)`` float32."""

    id: str
    label: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.float32)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.label.ndim != 1 or self.label.size < 1:
            raise InputError(f"{self.id}: label must be a nonempty vector")
        if np.any(self.label < 0) or abs(float(self.label.astype(np.float64).sum()) - 1) > 1e-6:
            raise InputError(f"{self.id}: label must be nonnegative and sum to 1")
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise InputError(f"{self.id}: data must be (persons, C, T, V), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError(f"{self.id}: non-finite coordinates")

    @property
    def persons(self):
        return self.data.shape[0]

    @property
    def num_classes(self):
        return self.label.size

    @property
    def target(self):
        return int(np.argmax(self.label))

    def replace(self, **changes):
        fields = {"id": self.id, "label": self.label, "data": self.data}
        fields.update(changes)
        return SkeletonSample(**fields)


def one_hot(k, num_classes):
    y = np.zeros(num_classes, dtype=np.float32)
    y[k] = 1.0
    return y


# ---------------------------------------------------------------------------
# NTU .skeleton text format


@dataclass
class NtuBody:
    body_id: str
    joints: np.ndarray  # (J, 3) float64, camera-frame meters


@dataclass
class NtuSequence:
    frames: list = field(default_factory=list)  # list[list[NtuBody]]

    @property
    def num_bodies(self):
        return len({b.body_id for f in self.frames for b in f})

    @property
    def num_joints(self):
        for f in self.frames:
            for b in f:
                return b.joints.shape[0]
        return 0


def parse_ntu_skeleton(stream):
    """Parse the public NTU RGB+D ``.skeleton`` layout.

    Only the 3-D position (first three fields of each joint line) is kept.
    Raises :class:`ParseError` with a line number on truncation or when a
    body's joint count disagrees with earlier bodies.
    """
    text = stream.read() if hasattr(stream, "read") else str(stream)
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines()
    pos = 0

    def take(what):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise ParseError(f"truncated file, expected {what}", pos + 1)
        pos += 1
        return lines[pos - 1].split(), pos

    def take_int(what):
        toks, ln = take(what)
        if len(toks) != 1:
            raise ParseError(f"expected {what}, got {' '.join(toks)!r}", ln)
        try:
            return int(toks[0]), ln
        except ValueError:
            raise ParseError(f"expected integer {what}, got {toks[0]!r}", ln) from None

    seq = NtuSequence()
    n_frames, _ = take_int("frame count")
    expected_joints = None
    for _ in range(n_frames):
        n_bodies, _ = take_int("body count")
        frame = []
        for _ in range(n_bodies):
            meta, _ = take("body info")
            n_joints, ln = take_int("joint count")
            if expected_joints is None:
                expected_joints = n_joints
            elif n_joints != expected_joints:
                raise ParseError(f"inconsistent joint count {n_joints} (expected {expected_joints})", ln)
            joints = np.empty((n_joints, 3), dtype=np.float64)
            for j in range(n_joints):
                toks, ln = take(f"joint {j}")
                if len(toks) < 3:
                    raise ParseError(f"joint line has {len(toks)} fields", ln)
                try:
                    joints[j] = [float(t) for t in toks[:3]]
                except ValueError:
                    raise ParseError(f"non-numeric joint position {toks[:3]}", ln) from None
            frame.append(NtuBody(meta[0], joints))
        seq.frames.append(frame)
    return seq


def read_ntu_skeleton(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ntu_skeleton(fh)


def write_ntu_skeleton(seq):
    """Render a sequence back to NTU text (metadata fields zero-filled)."""
    out = io.StringIO()
    out.write(f"{len(seq.frames)}\n")
    for frame in seq.frames:
        out.write(f"{len(frame)}\n")
        for body in frame:
            out.write(f"{body.body_id} 0 0 0 0 0 0 0 0 2\n")
            out.write(f"{body.joints.shape[0]}\n")
            for x, y, z in body.joints:
                out.write(f"{float(x)!r} {float(y)!r} {float(z)!r} 0 0 0 0 0 0 0 0 2\n")
    return out.getvalue()


_ACTION_RE = re.compile(r"A(\d{3})")


def ntu_label_from_name(name):
    """0-based action class from a name like ``S001C002P003R002A013``."""
    m = _ACTION_RE.search(Path(name).name)
    if not m:
        raise InputError(f"no action id in {name!r}")
    return int(m.group(1)) - 1


def _body_tracks(seq):
    order, index = [], {}
    for f in seq.frames:
        for b in f:
            if b.body_id not in index:
                index[b.body_id] = len(order)
                order.append(b.body_id)
    n_frames, n_joints = len(seq.frames), seq.num_joints
    tracks = np.zeros((len(order), n_frames, n_joints, 3))
    present = np.zeros((len(order), n_frames), dtype=bool)
    for t, f in enumerate(seq.frames):
        for b in f:
            k = index[b.body_id]
            tracks[k, t] = b.joints
            present[k, t] = True
    return tracks, present


def motion_energy(track, present):
    both = present[1:] & present[:-1]
    step = np.diff(track, axis=0)[both]
    return float((step ** 2).sum())


def resample_frames(x, frames):
    """Linear resampling along axis 0 at source positions ``t * L / frames``."""
    n = x.shape[0]
    pos = np.arange(frames) * (n / frames)
    i0 = np.minimum(np.floor(pos).astype(int), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = (pos - i0).reshape((-1,) + (1,) * (x.ndim - 1))
    return (1 - frac) * x[i0] + frac * x[i1]


def preprocess(seq, frames=64, max_persons=2, label=None, num_classes=None, sample_id="sample",
               spine_joint=0):
    """Turn a parsed sequence into a fixed-length :class:`SkeletonSample`.

    1. translate so the first body's spine base in the first populated frame
       sits at the origin;
    2. keep the ``max_persons`` bodies with the largest frame-to-frame motion
       energy (ties keep order of appearance);
    3. resample each kept body to exactly ``frames`` frames.
    """
    if not seq.frames or seq.num_joints == 0:
        raise InputError("sequence has no joints")
    tracks, present = _body_tracks(seq)
    first = next(f for f in seq.frames if f)
    origin = first[0].joints[spine_joint]
    tracks = np.where(present[..., None, None], tracks - origin, 0.0)

    energy = [motion_energy(tracks[k], present[k]) for k in range(len(tracks))]
    keep = sorted(range(len(tracks)), key=lambda k: (-energy[k], k))[:max_persons]
    data = np.stack([resample_frames(tracks[k], frames) for k in keep])  # (M, T, V, 3)
    data = data.transpose(0, 3, 1, 2).astype(np.float32)

    if label is None:
        raise InputError("preprocess needs a class label")
    if np.ndim(label) == 0:
        if num_classes is None:
            raise InputError("num_classes required with an integer label")
        label = one_hot(int(label), num_classes)
    return SkeletonSample(sample_id, label, data)


def bone_transform(sample, parents=NTU_PARENTS):
    """bone[j] = joint[j] - joint[parent(j)] on every person and frame."""
    parents = np.asarray(parents)
    if parents.size != sample.data.shape[-1]:
        raise ConfigurationError(f"parent table has {parents.size} joints, sample {sample.data.shape[-1]}")
    return sample.replace(data=sample.data - sample.data[..., parents])


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(classes=4, per_class=16, frames=16, joints=5, coords=3, persons=1,
                  seed=0, noise=0.05):
    """Separable toy actions: class ``k`` oscillates at ``k + 1`` cycles/clip.

    A shared rest pose plus per-class phase offsets per (coord, joint); each
    sample adds an amplitude jitter, a small phase jitter and Gaussian noise.
    """
    if classes < 2:
        raise InputError("synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    rest = rng.normal(0.0, 0.5, size=(coords, 1, joints))
    phases = rng.uniform(0, 2 * np.pi, size=(classes, coords, 1, joints))
    t = np.arange(frames).reshape(1, frames, 1) / frames
    samples = []
    for k in range(classes):
        freq = k + 1
        for i in range(per_class):
            people = []
            for _ in range(persons):
                amp = rng.uniform(0.8, 1.2)
                jitter = rng.normal(0.0, 0.1)
                x = rest + amp * np.sin(2 * np.pi * freq * t + phases[k] + jitter)
                people.append(x + rng.normal(0.0, noise, size=x.shape))
            samples.append(SkeletonSample(f"synth-{k}-{i}", one_hot(k, classes), np.stack(people)))
    return samples


# ---------------------------------------------------------------------------
# SKB1 binary store


def _skb1_encode(samples, out):
    out.write(SKB1_MAGIC)
    out.write(struct.pack("<H", SKB1_VERSION))
    for s in samples:
        name = s.id.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<I", s.label.size))
        out.write(s.label.astype("<f4").tobytes())
        out.write(struct.pack("<4I", *s.data.shape))
        out.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


def write_skb1(path, samples):
    with open(path, "wb") as fh:
        _skb1_encode(samples, fh)


def dumps_skb1(samples):
    buf = io.BytesIO()
    _skb1_encode(samples, buf)
    return buf.getvalue()


def loads_skb1(blob):
    view = memoryview(blob)
    if len(view) < 6 or bytes(view[:4]) != SKB1_MAGIC:
        raise FormatError("bad SKB1 magic")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != SKB1_VERSION:
        raise FormatError(f"unsupported SKB1 version {version}")
    pos = 6
    samples = []

    def need(n):
        if pos + n > len(view):
            raise FormatError(f"SKB1 truncated at byte {pos}")

    while pos < len(view):
        need(2)
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        need(n)
        sid = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        need(4)
        (k,) = struct.unpack_from("<I", view, pos)
        pos += 4
        need(4 * k)
        label = np.frombuffer(view, dtype="<f4", count=k, offset=pos).astype(np.float32)
        pos += 4 * k
        need(16)
        dims = struct.unpack_from("<4I", view, pos)
        pos += 16
        count = int(np.prod(dims))
        need(4 * count)
        data = np.frombuffer(view, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += 4 * count
        samples.append(SkeletonSample(sid, label, data.reshape(dims)))
    return samples


def read_skb1(path):
    with open(path, "rb") as fh:
        return loads_skb1(fh.read())


# ---------------------------------------------------------------------------
# JSONL store


def sample_to_json(s):
    return {"id": s.id, "label": [float(v) for v in s.label], "data": s.data.astype(np.float64).tolist()}


def sample_from_json(obj):
    try:
        return SkeletonSample(obj["id"], obj["label"], obj["data"])
    except KeyError as e:
        raise FormatError(f"JSONL record missing field {e}") from None


def write_jsonl(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s)))
            fh.write("\n")


def read_jsonl(path):
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"line {ln}: {e}") from None
            samples.append(sample_from_json(obj))
    return samples


def load_dataset(path):
    path = Path(path)
    if path.suffix in (".skb1", ".skb"):
        return read_skb1(path)
    if path.suffix == ".jsonl":
        return read_jsonl(path)
    if path.suffix == ".skeleton":
        raise FormatError("raw .skeleton files must be converted first")
    raise FormatError(f"unknown dataset format {path.suffix!r}")


def save_dataset(path, samples):
    path = Path(path)
    if path.suffix in (".skb1", ".skb"):
        write_skb1(path, samples)
    elif path.suffix == ".jsonl":
        write_jsonl(path, samples)
    else:
        raise FormatError(f"unknown dataset format {path.suffix!r}")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    name: str
    classes: int
    joints: int
    joint_names: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    lower: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)  # protocol -> {"train": [...], "val": [...]}

    def __post_init__(self):
        for protocol, parts in self.splits.items():
            seen = set()
            for part, ids in parts.items():
                dup = seen.intersection(ids)
                if dup:
                    raise ConfigurationError(f"{protocol}: ids {sorted(dup)[:3]} appear in several splits")
                seen.update(ids)

    def split(self, samples, protocol, part):
        wanted = set(self.splits[protocol][part])
        return [s for s in samples if s.id in wanted]

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))
