"""Normal, EAE and input-space adversarial training loops with pass instrumentation."""

import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackSpec, run_attack
from .data import BatchPlan, batches
from .eae import eae_perturb_batch
from .errors import ContractError, NumericAbort
from .nn import CyclicLrSchedule, build_model, cross_entropy, lr_at, sgd_step
from .tensor import COUNTERS, Tape, backward

METHODS = ("normal", "eae", "fgsm-at", "fast-at", "pgd-at")
_ATTACK_FOR = {"fgsm-at": ("fgsm",), "fast-at": ("fast-step",), "pgd-at": ("pgd", "bim")}
DEFAULT_GAMMA = 3.0


@dataclass(frozen=True)
class TrainSpec:
    method: str
    epochs: int
    batch_size: int
    clr_min: float = 0.0
    clr_max: float = 0.2
    gamma: float = None
    attack: AttackSpec = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown training method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if self.method == "eae":
            if self.gamma is None:
                raise ContractError("method 'eae' requires gamma")
        elif self.gamma is not None:
            raise ContractError(f"gamma only applies to method 'eae', not {self.method!r}")
        if self.method in _ATTACK_FOR:
            if self.attack is None:
                raise ContractError(f"method {self.method!r} requires an attack")
            if self.attack.kind not in _ATTACK_FOR[self.method]:
                raise ContractError(f"method {self.method!r} cannot use attack {self.attack.kind!r}")
        elif self.attack is not None:
            raise ContractError(f"method {self.method!r} takes no attack")

    def schedule(self, steps_per_epoch):
        # one extra step so the last update still has a positive rate
        return CyclicLrSchedule(self.clr_min, self.clr_max, self.epochs * steps_per_epoch + 1)

    def to_dict(self):
        d = asdict(self)
        d["attack"] = self.attack.to_dict() if self.attack else None
        return d


@dataclass
class Instrumentation:
    forward_passes: int = 0
    param_backward_passes: int = 0
    input_grad_passes: int = 0
    minibatches_per_epoch: int = 0
    wall_time_per_epoch: list = field(default_factory=list)

    def per_minibatch(self):
        steps = self.minibatches_per_epoch * len(self.wall_time_per_epoch)
        if not steps:
            return (0.0, 0.0, 0.0)
        return (
            self.forward_passes / steps,
            self.param_backward_passes / steps,
            self.input_grad_passes / steps,
        )

    def median_epoch_time(self, skip_warmup=True):
        times = self.wall_time_per_epoch
        if skip_warmup and len(times) > 1:
            times = times[1:]
        return statistics.median(times) if times else float("nan")

    def to_dict(self):
        return asdict(self)


def train(model, dataset, spec, callback=None):
    """Train ``model`` in place. Returns ``(model, instrumentation, history)``.

    ``history`` holds one dict per epoch with the mean training loss, the
    accuracy of the (unperturbed) training-stream logits, the gated fraction
    for EAE, and the epoch's wall time.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    plan = BatchPlan(spec.batch_size, spec.seed)
    k = plan.count(len(dataset))
    schedule = spec.schedule(k)
    instr = Instrumentation(minibatches_per_epoch=k)
    history = []
    start = COUNTERS.snapshot()
    step = 0
    for epoch in range(spec.epochs):
        t0 = time.perf_counter()
        loss_sum = 0.0
        correct = 0
        gated = 0
        seen = 0
        for xb, yb in batches(dataset, plan, epoch):
            x_train = xb
            if spec.attack is not None:
                x_train = run_attack(model, xb, yb, spec.attack, evaluate=False, seed=[spec.attack.seed, spec.seed, step]).x_adv
            # overflow surfaces below as a non-finite loss
            with Tape(), np.errstate(over="ignore", invalid="ignore"):
                z = model.forward_logits(x_train)
                logits = z
                if spec.method == "eae":
                    logits, gate = eae_perturb_batch(z, spec.gamma, return_gate=True)
                    gated += int(gate.sum())
                loss = cross_entropy(logits, yb)
                backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                model.zero_grad()
                raise NumericAbort(f"non-finite loss at epoch {epoch}, step {step}; lower clr_max")
            step += 1
            sgd_step(model, lr_at(schedule, step))
            loss_sum += value * len(yb)
            correct += int((z.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
        elapsed = time.perf_counter() - t0
        instr.wall_time_per_epoch.append(elapsed)
        record = {
            "epoch": epoch,
            "loss": loss_sum / seen,
            "train_acc": correct / seen,
            "gated_fraction": gated / seen if spec.method == "eae" else None,
            "seconds": elapsed,
            "lr": lr_at(schedule, step),
        }
        history.append(record)
        if callback is not None:
            callback(record)
    used = COUNTERS.since(start)
    instr.forward_passes = used.forward_passes
    instr.param_backward_passes = used.param_backward_passes
    instr.input_grad_passes = used.input_grad_passes
    return model, instr, history


def train_time_benchmark(specs, dataset, preset, model_seed=0, rounds=1):
    """Train a fresh ``preset`` model per spec and report the median epoch time.

    The first epoch of each run is treated as warm-up and left out of the
    median. Runs execute sequentially. With ``rounds > 1`` every run is
    repeated, alternating forward and reverse order so that slow drift in
    machine speed hits all specs alike, and the median is taken over the
    timed epochs of all rounds. Models, losses and pass counts come from the
    first round; training is deterministic, so later rounds reproduce them.
    """
    specs = list(specs)
    if len({(s.epochs, s.batch_size) for s in specs}) > 1:
        raise ContractError("benchmark specs must share epochs and batch_size")
    if rounds < 1:
        raise ContractError("rounds must be positive")
    rows = [None] * len(specs)
    times = [[] for _ in specs]
    for r in range(rounds):
        order = range(len(specs)) if r % 2 == 0 else reversed(range(len(specs)))
        for i in order:
            spec = specs[i]
            model = build_model(preset, dataset.sample_shape, dataset.num_classes, seed=model_seed)
            _, instr, history = train(model, dataset, spec)
            timed = instr.wall_time_per_epoch
            times[i].extend(timed[1:] if len(timed) > 1 else timed)
            if rows[i] is None:
                rows[i] = {
                    "method": spec.method,
                    "forward": instr.forward_passes,
                    "param_bwd": instr.param_backward_passes,
                    "input_grad_bwd": instr.input_grad_passes,
                    "final_loss": history[-1]["loss"],
                    "history": history,
                    "model": model,
                    "instrumentation": instr,
                }
    for row, samples in zip(rows, times):
        row["sec_per_epoch"] = statistics.median(samples)
        row["epochs_timed"] = len(samples)
    return rows
