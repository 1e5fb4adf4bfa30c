"""Skeleton augmentation: body-part mixing, vanilla mixup, coordinate scaling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import SkeletonSample
from .errors import ConfigurationError, InputError

# Lower-body joint indices per skeleton layout; everything else is upper body.
LOWER_BODY = {
    25: (0, 12, 13, 14, 15, 16, 17, 18, 19),  # Kinect v2: spine base + both legs
    20: (0, 12, 13, 14, 15, 16, 17, 18, 19),  # Kinect v1 (N-UCLA): hip center + legs
    15: (9, 10, 11, 12, 13, 14),  # SBU: hips, knees, feet
}


@dataclass(frozen=True)
class BodyPartition:
    upper: tuple
    lower: tuple

    def __post_init__(self):
        up, low = set(self.upper), set(self.lower)
        if not up or not low:
            raise ConfigurationError("both body parts must be nonempty")
        if up & low:
            raise ConfigurationError(f"joints {sorted(up & low)} are in both parts")

    @property
    def joints(self):
        return len(self.upper) + len(self.lower)

    def validate(self, num_joints):
        if set(self.upper) | set(self.lower) != set(range(num_joints)):
            raise ConfigurationError(f"partition does not cover joints 0..{num_joints - 1}")

    @classmethod
    def from_lower(cls, lower, num_joints):
        lower = tuple(sorted(lower))
        upper = tuple(j for j in range(num_joints) if j not in lower)
        return cls(upper, lower)


def default_partition(num_joints):
    """Known layouts use their anatomical split; others put the first half up."""
    if num_joints in LOWER_BODY:
        return BodyPartition.from_lower(LOWER_BODY[num_joints], num_joints)
    if num_joints < 2:
        raise ConfigurationError("need at least 2 joints to split a body")
    half = math.ceil(num_joints / 2)
    return BodyPartition.from_lower(range(half, num_joints), num_joints)


@dataclass
class MixPolicy:
    mode: str = "skeleton"  # "skeleton", "mixup" or "none"
    lam: float = 0.6
    alpha: float = 1 / 16
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("skeleton", "mixup", "none"):
            raise ConfigurationError(f"unknown mix mode {self.mode!r}")
        if not 0 <= self.lam <= 1 or not 0 <= self.alpha <= 1:
            raise ConfigurationError("lam and alpha must lie in [0, 1]")


def _blend_labels(a, b, lam):
    return (lam * a.label.astype(np.float64) + (1 - lam) * b.label.astype(np.float64)).astype(np.float32)


def _check_pair(a, b):
    if a.data.shape != b.data.shape:
        raise InputError(f"cannot mix {a.data.shape} with {b.data.shape}")
    if a.label.shape != b.label.shape:
        raise InputError("label lengths differ")


def skeleton_mix(a, b, partition, lam=0.6):
    """Upper-body joints from ``a``, lower-body joints from ``b``; labels blended."""
    _check_pair(a, b)
    partition.validate(a.data.shape[-1])
    data = a.data.copy()
    lower = list(partition.lower)
    data[..., lower] = b.data[..., lower]
    return SkeletonSample(f"{a.id}+{b.id}", _blend_labels(a, b, lam), data)


def vanilla_mixup(a, b, lam):
    _check_pair(a, b)
    data = (lam * a.data.astype(np.float64) + (1 - lam) * b.data.astype(np.float64)).astype(np.float32)
    return SkeletonSample(f"{a.id}*{b.id}", _blend_labels(a, b, lam), data)


def _match_persons(b, persons):
    if b.persons == persons:
        return b
    idx = [min(i, b.persons - 1) for i in range(persons)]
    return b.replace(data=b.data[idx])


def apply_batch_mix(batch, policy, partition=None, rng=None):
    """Replace ``floor(alpha * len(batch))`` samples with mixed versions.

    Victims are drawn without replacement; each is mixed with a different,
    randomly chosen member of the original batch. A partner with a different
    person count is padded by repeating its last person. Returns a new list.
    """
    batch = list(batch)
    if policy.mode == "none":
        return batch
    if len(batch) < 2:
        raise InputError("batch mixing needs at least 2 samples")
    count = math.floor(policy.alpha * len(batch) + 1e-9)
    if count < 1:
        return batch
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    if partition is None and policy.mode == "skeleton":
        partition = default_partition(batch[0].data.shape[-1])
    victims = rng.choice(len(batch), size=count, replace=False)
    out = list(batch)
    for v in victims:
        p = int(rng.integers(len(batch) - 1))
        p = p + 1 if p >= v else p
        a, b = batch[v], _match_persons(batch[p], batch[v].persons)
        if policy.mode == "skeleton":
            out[v] = skeleton_mix(a, b, partition, policy.lam)
        else:
            out[v] = vanilla_mixup(a, b, policy.lam)
    return out


def scale_coordinates(sample, factors):
    """Multiply coordinate channel ``c`` by ``factors[c]``; label unchanged."""
    s = np.asarray(factors, dtype=np.float64)
    if s.shape != (sample.data.shape[1],):
        raise InputError(f"need {sample.data.shape[1]} factors, got {s.shape}")
    if np.any(s < 0) or np.any(s > 1):
        warnings.warn(f"scale factors {s.tolist()} outside [0, 1]", stacklevel=2)
    data = (sample.data * s.reshape(1, -1, 1, 1)).astype(np.float32)
    return sample.replace(data=data)
