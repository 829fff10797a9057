"""Dice scoring, evaluation modes, experiment matrix and report output."""

import csv
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, ShapeError

log = logging.getLogger(__name__)

MODES = ("plain", "masked_k", "detta")


def dice_coefficient(pred, gt):
    """Dice overlap in percent; 100 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.dtype != bool and not np.isin(a, (0, 1)).all():
            raise DataError(f"{name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(p, g).sum()) / denom


def _cells(rows):
    """Per-(domain, method, seed) mean Dice over volumes."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["domain_tag"], r["method"], r["seed"])].append(r["dice_percent"])
    return [
        {"domain": d, "method": m, "seed": s, "dice_percent": float(np.mean(v)), "n_volumes": len(v)}
        for (d, m, s), v in sorted(acc.items(), key=lambda kv: tuple(map(str, kv[0])))
    ]


def _aggregate(rows):
    per_cell = defaultdict(list)
    per_vol = defaultdict(list)
    for c in _cells(rows):
        per_cell[(c["domain"], c["method"])].append(c["dice_percent"])
    for r in rows:
        per_vol[(r["domain_tag"], r["method"])].append(r["dice_percent"])
    out = {}
    for key in sorted(per_cell):
        seeds = np.asarray(per_cell[key])
        vols = np.asarray(per_vol[key])
        out[f"{key[0]}|{key[1]}"] = {
            "domain": key[0],
            "method": key[1],
            "mean": float(seeds.mean()),
            "std": float(seeds.std()),
            "n_seeds": int(seeds.size),
            "volume_mean": float(vols.mean()),
            "volume_std": float(vols.std()),
            "n_volumes": int(vols.size),
        }
    return out


@dataclass
class EvalReport:
    """Per-volume Dice rows plus aggregates recomputable from them.

    ``aggregates`` maps ``"domain|method"`` to the mean/std over seeds of
    the per-seed volume-averaged Dice (and the raw per-volume mean/std).
    """

    rows: list = field(default_factory=list)
    config_hash: str = ""
    aggregates: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r["dice_percent"] <= 100.0:
                raise DataError(f"dice_percent out of range in row {r}")
        if not self.aggregates:
            self.aggregates = _aggregate(self.rows)

    @property
    def cells(self):
        return _cells(self.rows)

    def recompute(self):
        return _aggregate(self.rows)

    def dice_by_volume(self):
        return {r["id"]: r["dice_percent"] for r in self.rows}

    def mean_dice(self):
        return float(np.mean([r["dice_percent"] for r in self.rows]))

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d):
        return cls(
            rows=d.get("rows", []),
            config_hash=d.get("config_hash", ""),
            aggregates=d.get("aggregates", {}),
            failures=d.get("failures", []),
            method_params=d.get("method_params", {}),
        )

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def merge(cls, reports):
        rows, failures, params = [], [], {}
        for r in reports:
            rows.extend(r.rows)
            failures.extend(r.failures)
            params.update(r.method_params)
        digest = hashlib.sha256("".join(r.config_hash for r in reports).encode()).hexdigest()[:16]
        return cls(rows=rows, config_hash=digest, failures=failures, method_params=params)


def _row(volume, method, dice, seed, adapted=False, fallback=False):
    return {
        "id": volume.id,
        "domain_tag": volume.domain_tag,
        "method": method,
        "dice_percent": float(dice),
        "seed": int(seed),
        "adapted": bool(adapted),
        "fallback": bool(fallback),
    }


def binarize(probs, threshold=0.5):
    return (np.asarray(probs) > threshold).astype(np.uint8)


def evaluate(model, dataset, mode, cfg, method=None, config_hash=""):
    """Score ``model`` on labeled volumes with one of :data:`MODES`.

    ``plain`` segments the unmasked slices, ``masked_k`` averages ``cfg.K``
    masked copies without adaptation, ``detta`` adapts per volume first.
    ``cfg`` is an :class:`~deynet.detta.AdaptConfig`.
    """
    from . import detta

    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    method = method or mode
    for v in dataset:
        if v.label is None:
            raise DataError(f"volume {v.id!r} has no label to score against")
    if mode == "detta":
        rep = detta.run_detta_eval(model, dataset, cfg, method=method)
        rep.config_hash = config_hash or rep.config_hash
        return rep
    k = 0 if mode == "plain" else cfg.K
    pcfg = cfg.replace(K=k)
    rows = []
    for v in dataset:
        probs = detta.predict_averaged(model, v, pcfg)
        rows.append(_row(v, method, dice_coefficient(binarize(probs, cfg.threshold), v.label), cfg.seed))
    return EvalReport(rows=rows, config_hash=config_hash or cfg.config_hash())


@dataclass
class Method:
    """One row of the experiment matrix.

    ``prepare(seed)`` returns a trained model; ``mode`` and ``adapt`` define
    how it is scored.  ``params`` feed the sweep plots (e.g. ``{"K": 2}``).
    """

    prepare: object
    mode: str = "plain"
    adapt: object = None
    params: dict = field(default_factory=dict)


def run_experiment_matrix(methods, datasets, seeds, out_dir=None):
    """Evaluate every (method, domain) cell for every seed.

    ``methods`` maps a method tag to :class:`Method`; ``datasets`` maps a
    domain tag to a list of labeled volumes.  Failures are recorded per
    cell and the matrix continues.  With ``out_dir`` the table and plots are
    written there.
    """
    from .detta import AdaptConfig

    if not seeds:
        raise ParameterError("at least one seed is required")
    reports, failures = [], []
    for name, meth in methods.items():
        for seed in seeds:
            try:
                model = meth.prepare(seed)
            except Exception as exc:  # noqa: BLE001 - recorded and skipped
                log.exception("method %s seed %s failed to prepare", name, seed)
                failures.extend(
                    {"method": name, "domain": d, "seed": seed, "error": repr(exc)} for d in datasets
                )
                continue
            cfg = (meth.adapt or AdaptConfig()).replace(seed=seed)
            for domain, vols in datasets.items():
                try:
                    rep = evaluate(model, vols, meth.mode, cfg, method=name)
                except Exception as exc:  # noqa: BLE001
                    log.exception("cell %s/%s seed %s failed", name, domain, seed)
                    failures.append({"method": name, "domain": domain, "seed": seed, "error": repr(exc)})
                    continue
                for r in rep.rows:
                    r["domain_tag"] = domain
                    r["seed"] = int(seed)
                reports.append(rep)
    merged = EvalReport.merge(reports) if reports else EvalReport()
    merged.failures = failures
    merged.method_params = {name: dict(m.params) for name, m in methods.items()}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        merged.to_json(out_dir / "report.json")
        write_table(merged, out_dir / "table.csv")
        write_plots(merged, out_dir / "plots")
    return merged


def write_table(report, path):
    """CSV with one line per (domain, method): mean and std over seeds."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "method", "mean", "std"])
        for agg in report.aggregates.values():
            w.writerow([agg["domain"], agg["method"], f"{agg['mean']:.4f}", f"{agg['std']:.4f}"])
    return path


def format_table(report):
    """Text table laid out with domains as columns, methods as rows."""
    domains = sorted({a["domain"] for a in report.aggregates.values()})
    methods = list(dict.fromkeys(a["method"] for a in report.aggregates.values()))
    width = max([len(m) for m in methods] + [6])
    lines = [" " * width + " | " + " | ".join(f"{d:>15}" for d in domains)]
    for m in methods:
        cells = []
        for d in domains:
            a = report.aggregates.get(f"{d}|{m}")
            cells.append(f"{a['mean']:7.2f}±{a['std']:<7.2f}" if a else f"{'-':>15}")
        lines.append(f"{m:<{width}} | " + " | ".join(cells))
    return "\n".join(lines)


def write_plots(report, directory):
    """Bar chart of every cell plus line plots for numeric sweep axes (K, alpha)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    aggs = list(report.aggregates.values())
    if not aggs:
        return written
    domains = sorted({a["domain"] for a in aggs})
    methods = list(dict.fromkeys(a["method"] for a in aggs))

    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(domains) * len(methods) / 2, 3.5))
    width = 0.8 / len(methods)
    for j, m in enumerate(methods):
        means = [report.aggregates.get(f"{d}|{m}", {}).get("mean", math.nan) for d in domains]
        stds = [report.aggregates.get(f"{d}|{m}", {}).get("std", 0.0) for d in domains]
        ax.bar(np.arange(len(domains)) + j * width, means, width, yerr=stds, label=m)
    ax.set_xticks(np.arange(len(domains)) + 0.4 - width / 2)
    ax.set_xticklabels(domains)
    ax.set_ylabel("Dice [%]")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = directory / "dice_bars.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    for axis in ("K", "alpha"):
        tagged = {m: p[axis] for m, p in report.method_params.items() if axis in p and m in methods}
        if len(set(tagged.values())) < 2:
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        for d in domains:
            pts = sorted(
                (v, report.aggregates[f"{d}|{m}"]["mean"])
                for m, v in tagged.items()
                if f"{d}|{m}" in report.aggregates
            )
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=d)
        ax.set_xlabel(axis)
        ax.set_ylabel("Dice [%]")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = directory / f"dice_vs_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
