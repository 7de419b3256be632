"""Run configuration: one JSON file fully determines a run.

Unknown keys are rejected at every level. Errors carry the dotted field path
and, where it can be located, the line in the source file.
"""

import json
import os
import re
from dataclasses import dataclass, field

from .attacks import AttackSpec
from .data import load_cifar10_subset, load_idx, make_image_surrogate, make_synthetic
from .errors import ConfigError, ContractError, FormatError
from .nn import PRESETS
from .train import TrainSpec

_TOP = {
    "seed",
    "single_threaded",
    "dataset",
    "model",
    "train",
    "attacks",
    "evaluation",
    "bench",
    "checkpoint",
    "histogram_bin_width",
    "out",
}
_TRAIN = {"method", "epochs", "batch_size", "clr_min", "clr_max", "gamma", "attack", "seed"}
_ATTACK = {"kind", "epsilon", "alpha", "iterations", "random_start", "seed"}
_EVAL = {"mode", "source_model", "source_epochs"}
_BENCH = {"methods", "source_model"}
_DATASETS = {
    "gaussian-blobs": ({"kind", "num_classes", "n", "dim", "noise", "test_fraction", "seed"}, set()),
    "rings": ({"kind", "num_classes", "n", "dim", "noise", "test_fraction", "seed"}, set()),
    "cifar10": ({"kind", "path", "classes", "train_per_class", "test_per_class"}, {"path"}),
    "cifar10-surrogate": (
        {"kind", "num_classes", "train_per_class", "test_per_class", "noise", "seed"},
        set(),
    ),
    "idx": (
        {"kind", "train_images", "train_labels", "test_images", "test_labels", "num_classes"},
        {"train_images", "train_labels", "test_images", "test_labels"},
    ),
}


@dataclass
class RunConfig:
    raw: dict
    seed: int
    dataset: dict
    model: str
    train: TrainSpec = None
    attacks: list = field(default_factory=list)
    evaluation: dict = field(default_factory=dict)
    bench: list = field(default_factory=list)
    bench_source: str = None
    checkpoint: str = None
    histogram_bin_width: float = 0.5
    single_threaded: bool = True
    out: str = None


class _Locator:
    def __init__(self, text):
        self.lines = text.splitlines() if text else []

    def line_of(self, key):
        pat = re.compile(r'"%s"\s*:' % re.escape(key))
        for i, line in enumerate(self.lines, 1):
            if pat.search(line):
                return i
        return None

    def error(self, message, path):
        # a missing key has no line of its own; fall back to its enclosing section
        line = None
        for part in reversed(path.split(".") if path else []):
            line = self.line_of(part.split("[", 1)[0])
            if line is not None:
                break
        return ConfigError(message, field=path, line=line)


def _check_keys(obj, allowed, path, loc, required=()):
    if not isinstance(obj, dict):
        raise loc.error("expected an object", path)
    for key in obj:
        if key not in allowed:
            raise loc.error(f"unknown key '{key}'", f"{path}.{key}" if path else key)
    for key in required:
        if key not in obj:
            raise loc.error("missing required field", f"{path}.{key}" if path else key)


def _attack(obj, path, loc, default_seed):
    _check_keys(obj, _ATTACK, path, loc, required=("kind", "epsilon"))
    args = dict(obj)
    args.setdefault("seed", default_seed)
    try:
        return AttackSpec(**args)
    except (ContractError, TypeError) as exc:
        raise loc.error(str(exc), path) from None


def _train(obj, path, loc, default_seed):
    _check_keys(obj, _TRAIN, path, loc, required=("method", "epochs", "batch_size"))
    args = dict(obj)
    args.setdefault("seed", default_seed)
    method = args["method"]
    if method == "eae" and "gamma" not in args:
        raise loc.error("method 'eae' requires gamma", f"{path}.gamma")
    if method in ("fgsm-at", "fast-at", "pgd-at") and "attack" not in args:
        raise loc.error(f"method '{method}' requires attack", f"{path}.attack")
    if "attack" in args:
        args["attack"] = _attack(args["attack"], f"{path}.attack", loc, args["seed"])
    try:
        return TrainSpec(**args)
    except (ContractError, TypeError) as exc:
        raise loc.error(str(exc), path) from None


def _dataset(obj, loc, default_seed):
    if not isinstance(obj, dict) or "kind" not in obj:
        raise loc.error("missing required field", "dataset.kind")
    kind = obj["kind"]
    if kind not in _DATASETS:
        raise loc.error(f"unknown dataset kind '{kind}'", "dataset.kind")
    allowed, required = _DATASETS[kind]
    _check_keys(obj, allowed, "dataset", loc, required=sorted(required))
    for key in ("path", "train_images", "train_labels", "test_images", "test_labels"):
        if key in obj and not os.path.exists(obj[key]):
            raise loc.error(f"path does not exist: {obj[key]}", f"dataset.{key}")
    d = dict(obj)
    if kind in ("gaussian-blobs", "rings", "cifar10-surrogate"):
        d.setdefault("seed", default_seed)
    return d


def parse_config(doc, text=None, seed=None, out=None):
    loc = _Locator(text)
    _check_keys(doc, _TOP, "", loc, required=("dataset", "model"))
    top_seed = doc.get("seed", 0) if seed is None else seed
    if not isinstance(top_seed, int) or top_seed < 0:
        raise loc.error("seed must be a non-negative integer", "seed")
    if doc["model"] not in PRESETS:
        raise loc.error(f"unknown model preset '{doc['model']}'", "model")
    cfg = RunConfig(raw=doc, seed=top_seed, dataset=_dataset(doc["dataset"], loc, top_seed), model=doc["model"])
    if "train" in doc:
        cfg.train = _train(doc["train"], "train", loc, top_seed)
    attacks = doc.get("attacks", [])
    if not isinstance(attacks, list):
        raise loc.error("expected a list", "attacks")
    cfg.attacks = [_attack(a, f"attacks[{i}]", loc, top_seed) for i, a in enumerate(attacks)]
    if "evaluation" in doc:
        _check_keys(doc["evaluation"], _EVAL, "evaluation", loc)
        cfg.evaluation = dict(doc["evaluation"])
        if cfg.evaluation.get("mode", "transfer") not in ("transfer", "white-box"):
            raise loc.error("mode must be 'transfer' or 'white-box'", "evaluation.mode")
    if "bench" in doc:
        _check_keys(doc["bench"], _BENCH, "bench", loc, required=("methods",))
        cfg.bench = [_train(m, f"bench.methods[{i}]", loc, top_seed) for i, m in enumerate(doc["bench"]["methods"])]
        cfg.bench_source = doc["bench"].get("source_model")
    cfg.checkpoint = doc.get("checkpoint")
    cfg.histogram_bin_width = float(doc.get("histogram_bin_width", 0.5))
    cfg.single_threaded = bool(doc.get("single_threaded", True))
    cfg.out = out or doc.get("out")
    return cfg


def load_config(path, seed=None, out=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    return parse_config(doc, text, seed=seed, out=out)


def load_datasets(spec):
    """Return ``(train, test)`` for a validated dataset section."""
    kind = spec["kind"]
    try:
        if kind in ("gaussian-blobs", "rings"):
            full = make_synthetic(
                kind,
                spec.get("num_classes", 3),
                spec.get("n", 300),
                spec.get("dim", 2),
                spec.get("noise", 0.5),
                spec["seed"],
            )
            return full.split(spec.get("test_fraction", 0.3), seed=spec["seed"])
        if kind == "cifar10":
            return load_cifar10_subset(
                spec["path"], spec.get("classes"), spec.get("train_per_class", 200), spec.get("test_per_class", 100)
            )
        if kind == "cifar10-surrogate":
            n_tr = spec.get("train_per_class", 200)
            n_te = spec.get("test_per_class", 100)
            full = make_image_surrogate(spec.get("num_classes", 10), n_tr + n_te, spec.get("noise", 0.5), spec["seed"])
            return full.split(n_te / (n_tr + n_te), seed=spec["seed"])
        if kind == "idx":
            c = spec.get("num_classes", 10)
            return (
                load_idx(spec["train_images"], spec["train_labels"], c),
                load_idx(spec["test_images"], spec["test_labels"], c),
            )
    except (FormatError, ContractError, OSError) as exc:
        raise ConfigError(str(exc), field="dataset") from None
    raise ConfigError(f"unknown dataset kind '{kind}'", field="dataset.kind")
