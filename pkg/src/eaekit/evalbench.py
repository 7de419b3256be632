"""Evaluation protocols: accuracy, black-box transfer suites, threshold sweeps and report files."""

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import attack_dataset, linf_violation
from .errors import ContractError
from .train import TrainSpec, train_time_benchmark

CSV_COLUMNS = (
    "method",
    "attack",
    "epsilon",
    "clean_acc",
    "perturbed_acc",
    "sec_per_epoch",
    "param_bwd",
    "input_grad_bwd",
    "seed",
)


def accuracy(model, inputs, labels, batch_size=512):
    """Fraction of rows whose arg-max logit (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(inputs) != len(labels):
        raise ContractError(f"{len(inputs)} inputs but {len(labels)} labels")
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(inputs, batch_size) == labels))


@dataclass
class TransferSuite:
    """Perturbed copies of one test set, crafted once against a source model."""

    source_preset: str
    labels: np.ndarray
    clean: np.ndarray
    sets: dict = field(default_factory=dict)
    source_success: dict = field(default_factory=dict)

    def evaluate(self, model):
        return {spec: accuracy(model, x, self.labels) for spec, x in self.sets.items()}


def build_transfer_suite(source_model, test_set, grid, batch_size=256):
    suite = TransferSuite(source_model.preset, test_set.labels.copy(), test_set.inputs)
    for spec in grid:
        if spec in suite.sets:
            continue
        result = attack_dataset(source_model, test_set.inputs, test_set.labels, spec, batch_size)
        if linf_violation(result.x_adv, test_set.inputs, spec.epsilon) > 0:
            raise AssertionError(f"{spec.label()} left the epsilon-ball")
        suite.sets[spec] = result.x_adv
        suite.source_success[spec] = float(result.success_mask.mean()) if len(result.success_mask) else 0.0
    return suite


def source_preset_for(defended_preset, sample_shape):
    """Pick a source architecture different from the defended one."""
    if defended_preset == "mlp-small":
        return "cnn-small" if len(sample_shape) == 3 else "mlp-deep"
    return "mlp-small"


@dataclass
class RunReport:
    method: str
    clean_acc: float
    perturbed_acc: dict
    instrumentation: dict
    config: dict
    seed: int
    sec_per_epoch: float = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "method": self.method,
            "clean_acc": self.clean_acc,
            "perturbed_acc": {k: v for k, v in sorted(self.perturbed_acc.items())},
            "sec_per_epoch": self.sec_per_epoch,
            "instrumentation": self.instrumentation,
            "config": self.config,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    def csv_rows(self):
        base = {
            "method": self.method,
            "clean_acc": self.clean_acc,
            "sec_per_epoch": self.sec_per_epoch,
            "param_bwd": self.instrumentation.get("param_backward_passes"),
            "input_grad_bwd": self.instrumentation.get("input_grad_passes"),
            "seed": self.seed,
        }
        if not self.perturbed_acc:
            return [dict(base, attack="none", epsilon=0.0, perturbed_acc=None)]
        rows = []
        for label, acc in sorted(self.perturbed_acc.items()):
            eps = _epsilon_of(label)
            rows.append(dict(base, attack=label, epsilon=eps, perturbed_acc=acc))
        return rows


def _epsilon_of(label):
    for part in label.split(","):
        if part.startswith("eps="):
            return float(part[4:])
    return None


def report_from_run(method, model, instr, test_set, suite=None, config=None, seed=0, metadata=None):
    perturbed = {}
    if suite is not None:
        perturbed = {spec.label(): acc for spec, acc in suite.evaluate(model).items()}
    summary = instr.to_dict()
    return RunReport(
        method=method,
        clean_acc=accuracy(model, test_set.inputs, test_set.labels),
        perturbed_acc=perturbed,
        instrumentation=summary,
        config=config or {},
        seed=seed,
        sec_per_epoch=instr.median_epoch_time(),
        metadata=metadata or {},
    )


def threshold_sweep(
    train_set, test_set, gammas, base_spec, preset, perturbed=None, model_seed=0, rounds=1, include_normal=False
):
    """One EAE run per gamma with everything else fixed.

    ``perturbed`` is an optional pre-built perturbed copy of the test inputs.
    Rows are ``{"gamma", "sec_per_epoch", "clean_acc", "perturbed_acc",
    "gated_fraction"}``; with ``include_normal`` a last row with
    ``gamma=None`` holds plain training under the same settings. ``rounds``
    is passed to ``train_time_benchmark``.
    """
    gammas = list(gammas)
    if len(gammas) < 2:
        raise ContractError("threshold_sweep needs at least two gammas")
    common = (base_spec.epochs, base_spec.batch_size, base_spec.clr_min, base_spec.clr_max)
    specs = [TrainSpec("eae", *common, gamma=g, seed=base_spec.seed) for g in gammas]
    if include_normal:
        specs.append(TrainSpec("normal", *common, seed=base_spec.seed))
    rows = []
    for spec, run in zip(specs, train_time_benchmark(specs, train_set, preset, model_seed, rounds)):
        model = run["model"]
        rows.append(
            {
                "gamma": spec.gamma,
                "sec_per_epoch": run["sec_per_epoch"],
                "clean_acc": accuracy(model, test_set.inputs, test_set.labels),
                "perturbed_acc": accuracy(model, perturbed, test_set.labels) if perturbed is not None else None,
                "gated_fraction": run["history"][-1]["gated_fraction"],
            }
        )
    return rows


# ---------------------------------------------------------------------------
# file emission


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def reports_json(reports):
    docs = [r.to_dict() if isinstance(r, RunReport) else r for r in reports]
    return json.dumps(docs, indent=2, sort_keys=True) + "\n"


def reports_csv(reports):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        for row in r.csv_rows():
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def emit_report(reports, path, fmt="json"):
    if fmt == "json":
        _write_text(path, reports_json(reports))
    elif fmt == "csv":
        _write_text(path, reports_csv(reports))
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    return path


def write_rows_csv(rows, path, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
    _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# SVG

_W, _H = 640, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 56, 16, 28, 40


def _f(v):
    return f"{v:.2f}"


def _svg(body, title):
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">\n'
        f"<title>{title}</title>\n"
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>\n'
    )
    return head + "".join(body) + "</svg>\n"


def histogram_scale(stats_pos, stats_neg):
    """Return ``(x_min, x_max, x_of)`` shared by both histograms."""
    width = stats_pos.bin_width
    lo = min(stats_pos.histogram[0][0], stats_neg.histogram[0][0])
    hi = max(stats_pos.histogram[-1][0], stats_neg.histogram[-1][0]) + width
    plot_w = _W - _LEFT - _RIGHT

    def x_of(v):
        return _LEFT + (v - lo) / (hi - lo) * plot_w

    return lo, hi, x_of


def histogram_svg(stats_pos, stats_neg, labels=("seed", "non-seed")):
    """Overlay two logit-difference histograms with dashed lines at their means."""
    if stats_pos.bin_width != stats_neg.bin_width:
        raise ContractError("histograms must share a bin width")
    lo, hi, x_of = histogram_scale(stats_pos, stats_neg)
    plot_h = _H - _TOP - _BOTTOM
    peak = max(max(n for _, n in s.histogram) for s in (stats_pos, stats_neg))
    colours = ("#d62728", "#1f77b4")
    body = [
        f'<line x1="{_LEFT}" y1="{_H - _BOTTOM}" x2="{_W - _RIGHT}" y2="{_H - _BOTTOM}" stroke="black"/>\n',
        f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_H - _BOTTOM}" stroke="black"/>\n',
        f'<text x="{_W / 2:.2f}" y="{_H - 8}" text-anchor="middle">logit difference (top-1 minus top-2)</text>\n',
        f'<text x="12" y="{_TOP + plot_h / 2:.2f}" transform="rotate(-90 12 {_TOP + plot_h / 2:.2f})" '
        'text-anchor="middle">count</text>\n',
        f'<text x="{_LEFT}" y="{_H - _BOTTOM + 14}" text-anchor="middle">{lo:g}</text>\n',
        f'<text x="{_W - _RIGHT}" y="{_H - _BOTTOM + 14}" text-anchor="middle">{hi:g}</text>\n',
    ]
    for name, stats, colour in zip(labels, (stats_pos, stats_neg), colours):
        for left, n in stats.histogram:
            if n == 0:
                continue
            x0, x1 = x_of(left), x_of(left + stats.bin_width)
            h = n / peak * plot_h
            body.append(
                f'<rect class="bar {name}" x="{_f(x0)}" y="{_f(_H - _BOTTOM - h)}" width="{_f(x1 - x0)}" '
                f'height="{_f(h)}" fill="{colour}" fill-opacity="0.45" data-count="{n}"/>\n'
            )
        xm = x_of(stats.mean)
        body.append(
            f'<line class="mld {name}" x1="{_f(xm)}" y1="{_TOP}" x2="{_f(xm)}" y2="{_H - _BOTTOM}" '
            f'stroke="{colour}" stroke-dasharray="5,3" data-mld="{stats.mean:.6g}"/>\n'
        )
        body.append(
            f'<text x="{_f(xm + 4)}" y="{_TOP + (12 if name == labels[0] else 26)}" fill="{colour}">'
            f"MLD({name}) = {stats.mean:.2f} (n={stats.count})</text>\n"
        )
    return _svg(body, "logit-difference distribution")


def emit_histogram_svg(stats_pos, stats_neg, path, labels=("seed", "non-seed")):
    _write_text(path, histogram_svg(stats_pos, stats_neg, labels))
    return path


def bar_chart_svg(categories, series, title):
    """Grouped bars; ``series`` maps a series name to one value per category."""
    names = list(series)
    peak = max([v for vals in series.values() for v in vals if v is not None] + [1e-12])
    plot_w = _W - _LEFT - _RIGHT
    plot_h = _H - _TOP - _BOTTOM
    group = plot_w / max(1, len(categories))
    bar = group * 0.8 / max(1, len(names))
    palette = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")
    body = [
        f'<text x="{_W / 2:.2f}" y="16" text-anchor="middle">{title}</text>\n',
        f'<line x1="{_LEFT}" y1="{_H - _BOTTOM}" x2="{_W - _RIGHT}" y2="{_H - _BOTTOM}" stroke="black"/>\n',
    ]
    for ci, cat in enumerate(categories):
        gx = _LEFT + ci * group
        body.append(f'<text x="{_f(gx + group / 2)}" y="{_H - _BOTTOM + 14}" text-anchor="middle">{cat}</text>\n')
        for si, name in enumerate(names):
            v = series[name][ci]
            if v is None:
                continue
            h = v / peak * plot_h
            x = gx + group * 0.1 + si * bar
            body.append(
                f'<rect class="{name}" x="{_f(x)}" y="{_f(_H - _BOTTOM - h)}" width="{_f(bar)}" height="{_f(h)}" '
                f'fill="{palette[si % len(palette)]}" data-value="{v:.6g}"/>\n'
            )
    for si, name in enumerate(names):
        body.append(
            f'<text x="{_W - _RIGHT - 4}" y="{_TOP + 12 * si}" text-anchor="end" '
            f'fill="{palette[si % len(palette)]}">{name}</text>\n'
        )
    return _svg(body, title)


def emit_bar_chart_svg(categories, series, title, path):
    _write_text(path, bar_chart_svg(categories, series, title))
    return path


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path

