"""Logit-space perturbations: logit differences, seed partitions and the minimal top-2 equaliser.

For logits ``z`` with largest component ``z_y`` and runner-up ``z_s`` the
smallest L2 change that makes the two equal moves each half the gap::

    delta[y] = -(z_y - z_s) / 2,   delta[s] = +(z_y - z_s) / 2,   0 elsewhere

so ``||delta||_2 = (z_y - z_s) / sqrt(2)``. Nothing here computes an input
gradient.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, attack_dataset
from .errors import ContractError
from .tensor import Tensor, add


@dataclass(frozen=True)
class LogitDifference:
    y: int
    s: int
    d: float


@dataclass(frozen=True)
class LogitDelta:
    delta: np.ndarray
    y: int
    s: int


def top2(z):
    """Row-wise indices of the largest and second-largest logits, lowest index on ties."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] < 2:
        raise ContractError("need at least two classes")
    rows = np.arange(len(z))
    y = z.argmax(axis=1)
    masked = z.copy()
    masked[rows, y] = -np.inf
    s = masked.argmax(axis=1)
    return y, s, z[rows, y] - z[rows, s]


def logit_difference(z):
    y, s, d = top2(np.asarray(z, dtype=np.float64).reshape(1, -1))
    return LogitDifference(int(y[0]), int(s[0]), float(d[0]))


def eae_delta(z):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    ld = logit_difference(z)
    delta = np.zeros_like(z)
    delta[ld.y] = -ld.d / 2.0
    delta[ld.s] = ld.d / 2.0
    return LogitDelta(delta, ld.y, ld.s)


def delta_batch(z, gamma):
    """Per-row perturbation matrix and the boolean gate ``d < gamma``."""
    z = np.asarray(z, dtype=np.float64)
    y, s, d = top2(z)
    gate = d < gamma
    rows = np.flatnonzero(gate)
    delta = np.zeros_like(z)
    half = d[rows] / 2.0
    delta[rows, y[rows]] = -half
    delta[rows, s[rows]] = half
    return delta, gate


def eae_perturb_batch(z, gamma, return_gate=False):
    """Add the top-2 equaliser to every row whose logit difference is below ``gamma``.

    The perturbation enters the tape as a constant, so gradients reach the
    parameters through ``z`` only.
    """
    z = z if isinstance(z, Tensor) else Tensor(z)
    delta, gate = delta_batch(z.data, gamma)
    out = add(z, Tensor(delta))
    return (out, gate) if return_gate else out


# ---------------------------------------------------------------------------
# seed statistics


@dataclass
class LdStats:
    mean: float
    std: float
    count: int
    bin_width: float
    histogram: list

    def to_dict(self):
        return {
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "bin_width": self.bin_width,
            "histogram": [[lo, n] for lo, n in self.histogram],
        }


def ld_stats(values, bin_width=0.5):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("ld_stats needs at least one value")
    if bin_width <= 0:
        raise ContractError("bin_width must be positive")
    lo_bin = int(np.floor(values.min() / bin_width))
    bins = np.floor(values / bin_width).astype(np.int64) - lo_bin
    counts = np.bincount(bins)
    histogram = [(round((lo_bin + i) * bin_width, 12), int(n)) for i, n in enumerate(counts)]
    return LdStats(float(values.mean()), float(values.std()), int(values.size), float(bin_width), histogram)


@dataclass
class SeedPartition:
    seeds: list
    non_seeds: list
    attack: AttackSpec
    epsilon: float
    warning: str = None
    candidates: int = field(init=False)

    def __post_init__(self):
        self.candidates = len(self.seeds) + len(self.non_seeds)

    def seed_lds(self):
        return np.array([ld for _, ld in self.seeds], dtype=np.float64)

    def non_seed_lds(self):
        return np.array([ld for _, ld in self.non_seeds], dtype=np.float64)

    def summary(self):
        pos, neg = self.seed_lds(), self.non_seed_lds()
        return {
            "epsilon": self.epsilon,
            "attack": self.attack.to_dict(),
            "candidates": self.candidates,
            "n_seed": len(pos),
            "mld_seed": float(pos.mean()) if pos.size else None,
            "n_non_seed": len(neg),
            "mld_non_seed": float(neg.mean()) if neg.size else None,
            "warning": self.warning,
        }

    def to_dict(self):
        doc = self.summary()
        doc["seeds"] = [[int(i), float(ld)] for i, ld in self.seeds]
        doc["non_seeds"] = [[int(i), float(ld)] for i, ld in self.non_seeds]
        return doc


def partition_seeds(model, dataset, attack, batch_size=256):
    """Split correctly classified examples by whether ``attack`` flips them.

    Logit differences come from the clean forward pass.
    """
    z = model.logits(dataset.inputs, batch_size)
    y, _, d = top2(z)
    candidates = np.flatnonzero(y == dataset.labels)
    if candidates.size == 0:
        msg = "no correctly classified examples; partition is empty"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return SeedPartition([], [], attack, attack.epsilon, warning=msg)
    result = attack_dataset(model, dataset.inputs[candidates], dataset.labels[candidates], attack, batch_size)
    flipped = result.success_mask
    seeds = [(int(i), float(d[i])) for i in candidates[flipped]]
    non_seeds = [(int(i), float(d[i])) for i in candidates[~flipped]]
    warning = None if seeds else "attack flipped no candidate; seed set is empty"
    return SeedPartition(seeds, non_seeds, attack, attack.epsilon, warning=warning)


class EmptySeedSetError(ContractError):
    pass


def threshold_from_partition(partition):
    """Mean logit difference over the seed set."""
    lds = partition.seed_lds()
    if lds.size == 0:
        raise EmptySeedSetError(
            "seed set is empty: raise the attack epsilon, or pick gamma in [2, 4] by hand"
        )
    return float(lds.mean())
