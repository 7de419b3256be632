"""L-infinity input-space attacks: FGSM, RFGSM, BIM, PGD and the Fast-AT random-init step."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .nn import cross_entropy
from .tensor import Tape, Tensor, grad

ATTACK_KINDS = ("fgsm", "rfgsm", "bim", "pgd", "fast-step")


@dataclass(frozen=True)
class AttackSpec:
    """Attack configuration. ``epsilon`` and ``alpha`` are in pixel units.

    For ``rfgsm`` ``alpha`` is the half-width of the uniform noise step and the
    gradient step uses the remaining ``epsilon - alpha``; it defaults to
    ``epsilon / 2``.
    """

    kind: str
    epsilon: float
    alpha: float = None
    iterations: int = 1
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractError("epsilon must lie in [0, 1]")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.iterations < 1:
            raise ContractError("iterations must be at least 1")
        if self.kind == "fgsm" and self.iterations != 1:
            raise ContractError("fgsm is single-step")
        if self.kind in ("bim", "pgd", "fast-step") and self.alpha is None:
            raise ContractError(f"{self.kind} needs a step size alpha")
        if self.kind == "rfgsm" and self.alpha is not None and self.alpha > self.epsilon:
            raise ContractError("rfgsm noise width alpha cannot exceed epsilon")

    @property
    def input_grad_passes(self):
        return self.iterations if self.kind in ("bim", "pgd") else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def label(self):
        parts = [self.kind, f"eps={self.epsilon:g}"]
        if self.alpha is not None:
            parts.append(f"alpha={self.alpha:g}")
        if self.kind in ("bim", "pgd"):
            parts.append(f"K={self.iterations}")
        return ",".join(parts)


@dataclass
class PerturbedBatch:
    x_adv: np.ndarray
    success_mask: np.ndarray = None


def input_gradient(model, x, y):
    """Gradient of the mean cross-entropy with respect to the input batch."""
    with Tape():
        xt = Tensor(x, requires_grad=True)
        loss = cross_entropy(model.forward_logits(xt), y)
        (g,) = grad(loss, [xt])
    return g


def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _finish(model, x_adv, y, evaluate):
    mask = None
    if evaluate:
        mask = model.predict(x_adv) != np.asarray(y)
    return PerturbedBatch(x_adv, mask)


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _rng(spec, seed):
    return np.random.default_rng(spec.seed if seed is None else seed)


def fgsm(model, x, y, spec, evaluate=True, seed=None):
    x = _as_array(x)
    g = input_gradient(model, x, y)
    x_adv = np.clip(x + spec.epsilon * np.sign(g), 0.0, 1.0)
    return _finish(model, x_adv, y, evaluate)


def _iterate(model, x, x_adv, y, spec):
    for _ in range(spec.iterations):
        g = input_gradient(model, x_adv, y)
        x_adv = _project(x_adv + spec.alpha * np.sign(g), x, spec.epsilon)
    return x_adv


def bim(model, x, y, spec, evaluate=True, seed=None):
    x = _as_array(x)
    return _finish(model, _iterate(model, x, x.copy(), y, spec), y, evaluate)


def pgd(model, x, y, spec, evaluate=True, seed=None):
    x = _as_array(x)
    start = x.copy()
    if spec.random_start:
        noise = _rng(spec, seed).uniform(-spec.epsilon, spec.epsilon, size=x.shape)
        start = np.clip(x + noise, 0.0, 1.0)
    return _finish(model, _iterate(model, x, start, y, spec), y, evaluate)


def rfgsm(model, x, y, spec, evaluate=True, seed=None):
    x = _as_array(x)
    width = spec.epsilon / 2 if spec.alpha is None else spec.alpha
    start = np.clip(x + _rng(spec, seed).uniform(-width, width, size=x.shape), 0.0, 1.0)
    g = input_gradient(model, start, y)
    x_adv = _project(start + (spec.epsilon - width) * np.sign(g), x, spec.epsilon)
    return _finish(model, x_adv, y, evaluate)


def fast_step(model, x, y, spec, evaluate=True, seed=None):
    x = _as_array(x)
    delta = _rng(spec, seed).uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    start = np.clip(x + delta, 0.0, 1.0)
    g = input_gradient(model, start, y)
    x_adv = _project(start + spec.alpha * np.sign(g), x, spec.epsilon)
    return _finish(model, x_adv, y, evaluate)


_DISPATCH = {"fgsm": fgsm, "rfgsm": rfgsm, "bim": bim, "pgd": pgd, "fast-step": fast_step}


def run_attack(model, x, y, spec, evaluate=True, seed=None):
    return _DISPATCH[spec.kind](model, x, y, spec, evaluate=evaluate, seed=seed)


def attack_dataset(model, inputs, labels, spec, batch_size=256):
    """Attack a whole array in fixed-order chunks; chunk ``i`` uses seed ``(spec.seed, i)``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    xs, masks = [], []
    for b, start in enumerate(range(0, len(inputs), batch_size)):
        sl = slice(start, start + batch_size)
        pb = run_attack(model, inputs[sl], labels[sl], spec, seed=[spec.seed, b])
        xs.append(pb.x_adv)
        masks.append(pb.success_mask)
    if not xs:
        return PerturbedBatch(inputs.copy(), np.zeros(0, dtype=bool))
    return PerturbedBatch(np.concatenate(xs), np.concatenate(masks))


def linf_violation(x_adv, x, epsilon, tol=1e-9):
    """Largest amount by which ``x_adv`` leaves the epsilon-ball or the [0, 1] box (0 if none)."""
    x_adv = np.asarray(x_adv)
    over_ball = np.max(np.abs(x_adv - x), initial=0.0) - (epsilon + tol)
    over_box = max(-np.min(x_adv, initial=0.0), np.max(x_adv, initial=0.0) - 1.0) - tol
    return max(0.0, over_ball, over_box)
