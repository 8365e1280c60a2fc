"""Config-driven experiment runner: baseline pretrain, dual-model training,
final evaluation, and all on-disk artifacts (metrics, thresholds, class-wise
table, feature export, checkpoints, summary).

Every run is reproducible from (config, seed): re-running a config writes
byte-identical metrics.csv and checkpoints. The wall_ms column in
metrics.csv is therefore emitted as 0; real timings live in summary.json.
"""
from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baseline import BaselineResult, train_baseline
from .config import (ConfigError, METRICS_COLUMNS, MetricsRow, TrainConfig,
                     load_config)
from .core import NonFiniteLossError, train_fixbi
from .data import (Array, CsvFormatError, Dataset, as_target_view,
                   gen_blobs_shift, gen_moons_shift, load_csv)
from .models import (ClassifierModel, DualState, ensemble_predict,
                     extract_features, predict_labels, save_checkpoint)

METRICS_VERSION = "v1"
UNDEFINED = "NA"  # class-wise accuracy marker for classes absent from the eval set


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v) + 0.0)


def load_dataset_pair(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Materialize the configured source/target pair."""
    ds = cfg.dataset
    seed = cfg.dataset_seed()
    if ds.kind == "blobs":
        return gen_blobs_shift(ds.num_classes, ds.per_class, ds.dim,
                               ds.rotation_deg, ds.translation, ds.noise_sigma, seed)
    if ds.kind == "moons":
        return gen_moons_shift(ds.per_class, ds.rotation_deg, ds.noise_sigma, seed)
    if ds.kind == "csv":
        source = load_csv(ds.source)
        target = as_target_view(load_csv(ds.target))
        if source.num_classes != target.num_classes:
            raise ConfigError("dataset.source/target: class counts differ")
        if source.dim != target.dim:
            raise ConfigError("dataset.source/target: feature dims differ")
        return source, target
    raise ConfigError(f"dataset.kind: unknown kind {ds.kind!r}")


# -- metrics.csv -------------------------------------------------------------

def emit_report(rows: list[MetricsRow], out_dir) -> Path:
    """Write metrics.csv: one versioned header line, then one row per epoch."""
    if not rows:
        raise ValueError("emit_report needs at least one metrics row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.csv"
    lines = [f"# {METRICS_VERSION} " + ",".join(METRICS_COLUMNS)]
    for row in rows:
        cells = []
        for col in METRICS_COLUMNS:
            if col == "wall_ms":
                cells.append("0")  # kept deterministic; real timing in summary.json
            elif col in ("epoch", "n_above_sd", "n_above_td"):
                cells.append(str(int(getattr(row, col))))
            else:
                cells.append(_fmt(getattr(row, col)))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_metrics_csv(path) -> list[MetricsRow]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.split("\n") if ln]
    if not lines:
        raise ValueError(f"empty metrics file: {path}")
    header = lines[0]
    prefix = f"# {METRICS_VERSION} "
    if not header.startswith(prefix):
        raise ValueError(f"unrecognized metrics header: {header!r}")
    columns = header[len(prefix):].split(",")
    if columns != METRICS_COLUMNS:
        raise ValueError("metrics.csv column mismatch")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        kwargs = {}
        for col, cell in zip(columns, cells):
            if col in ("epoch", "n_above_sd", "n_above_td"):
                kwargs[col] = int(cell)
            else:
                kwargs[col] = float(cell)
        rows.append(MetricsRow(**kwargs))
    return rows


# -- class-wise accuracy -----------------------------------------------------

def classwise_accuracy(pred: Array, truth: Array, num_classes: int) -> list[float | None]:
    """Per-class accuracy; ``None`` where a class is absent from the eval set."""
    out: list[float | None] = []
    for c in range(num_classes):
        sel = truth == c
        n = int(sel.sum())
        out.append(None if n == 0 else float((pred[sel] == c).mean()))
    return out


def rank_class_gaps(acc_sd: list[float | None], acc_td: list[float | None],
                    top_n: int = 10) -> list[tuple[int, float]]:
    """Classes ranked by |SDM - TDM| class-wise accuracy gap, largest first.

    Classes undefined for either model are skipped. Ties keep the lower
    class index first.
    """
    gaps = [(c, abs(a - b)) for c, (a, b) in enumerate(zip(acc_sd, acc_td))
            if a is not None and b is not None]
    gaps.sort(key=lambda item: (-item[1], item[0]))
    return gaps[:top_n]


@dataclass
class ClasswiseReport:
    counts: list[int]
    acc_sd: list[float | None]
    acc_td: list[float | None]
    acc_ens: list[float | None]
    top_gaps: list[tuple[int, float]]


def classwise_report(dual: DualState, eval_ds: Dataset, top_n: int = 10) -> ClasswiseReport:
    truth = eval_ds.eval_labels()
    pred_sd = predict_labels(dual.sdm, eval_ds.features)
    pred_td = predict_labels(dual.tdm, eval_ds.features)
    pred_ens = ensemble_predict(dual.sdm, dual.tdm, eval_ds.features)
    c = eval_ds.num_classes
    counts = [int((truth == k).sum()) for k in range(c)]
    acc_sd = classwise_accuracy(pred_sd, truth, c)
    acc_td = classwise_accuracy(pred_td, truth, c)
    acc_ens = classwise_accuracy(pred_ens, truth, c)
    return ClasswiseReport(counts, acc_sd, acc_td, acc_ens,
                           rank_class_gaps(acc_sd, acc_td, top_n))


def _write_classwise(report: ClasswiseReport, path: Path) -> None:
    lines = ["class,n,acc_sd,acc_td,acc_ens,gap"]
    for c, n in enumerate(report.counts):
        a, b, e = report.acc_sd[c], report.acc_td[c], report.acc_ens[c]
        gap = UNDEFINED if a is None or b is None else _fmt(abs(a - b))
        cells = [str(c), str(n),
                 UNDEFINED if a is None else _fmt(a),
                 UNDEFINED if b is None else _fmt(b),
                 UNDEFINED if e is None else _fmt(e),
                 gap]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_threshold_trace(dual: DualState, path: Path) -> None:
    lines = ["epoch,iteration,tau_sd,tau_td,n_above_sd,n_above_td"]
    for epoch, it, tau_sd, tau_td, nab_sd, nab_td in dual.threshold_trace:
        lines.append(f"{epoch},{it},{_fmt(tau_sd)},{_fmt(tau_td)},{nab_sd},{nab_td}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_threshold_chart(dual: DualState, warmup_epochs: int, path: Path) -> None:
    """Self-contained SVG line chart of both models' adaptive thresholds over
    training, with the warm-up boundary marked."""
    trace = dual.threshold_trace
    if not trace:
        return
    width, height, margin = 640, 320, 45
    n_epochs = trace[-1][0]
    per_epoch = max(it for _, it, *_ in trace)

    def x_pos(epoch: int, it: int) -> float:
        frac = (epoch - 1 + it / per_epoch) / max(1, n_epochs)
        return margin + frac * (width - 2 * margin)

    def y_pos(tau: float) -> float:
        return height - margin - tau * (height - 2 * margin)

    def polyline(idx: int, color: str, label: str, label_y: int) -> list[str]:
        pts = " ".join(f"{x_pos(t[0], t[1]):.1f},{y_pos(t[idx]):.1f}" for t in trace)
        return [f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
                f'points="{pts}"/>',
                f'<text x="{width - margin - 150}" y="{label_y}" fill="{color}" '
                f'font-size="12">{label}</text>']

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 8}" font-size="12" '
        f'text-anchor="middle">epoch (1..{n_epochs})</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">confidence threshold</text>',
    ]
    for tau_tick in (0.0, 0.5, 1.0):
        y = y_pos(tau_tick)
        parts.append(f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" font-size="10" '
                     f'text-anchor="end">{tau_tick:g}</text>')
    if 0 < warmup_epochs < n_epochs:
        x = x_pos(warmup_epochs, per_epoch)
        parts.append(f'<line x1="{x:.1f}" y1="{margin}" x2="{x:.1f}" '
                     f'y2="{height - margin}" stroke="gray" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{x + 4:.1f}" y="{margin + 12}" font-size="10" '
                     f'fill="gray">warm-up ends</text>')
    parts += polyline(2, "#1f77b4", "source-dominant model", margin + 14)
    parts += polyline(3, "#d62728", "target-dominant model", margin + 30)
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def _write_features(dual: DualState, source: Dataset, target: Dataset,
                    path: Path) -> None:
    """Final-epoch feature vectors of both models with domain tag and label."""
    k_sd = dual.sdm.feature_dim
    k_td = dual.tdm.feature_dim
    header = (["domain", "label"]
              + [f"sd_{i}" for i in range(k_sd)]
              + [f"td_{i}" for i in range(k_td)])
    lines = [",".join(header)]
    for ds in (source, target):
        labels = ds.eval_labels()
        f_sd = extract_features(dual.sdm, ds.features).data
        f_td = extract_features(dual.tdm, ds.features).data
        for i in range(ds.n):
            cells = [ds.domain_tag, str(int(labels[i]))]
            cells += [_fmt(v) for v in f_sd[i]]
            cells += [_fmt(v) for v in f_td[i]]
            lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- the experiment ----------------------------------------------------------

@dataclass
class ExperimentResult:
    config: TrainConfig
    baseline: BaselineResult
    dual: DualState
    metrics: list[MetricsRow]
    summary: dict


def execute(cfg: TrainConfig, out_dir) -> ExperimentResult:
    """Baseline pretrain, dual-model train, final eval; writes all artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    source, target = load_dataset_pair(cfg)
    try:
        base = train_baseline(cfg, source, target)
        dual, rows = train_fixbi(cfg, source, target, base.model)
    except NonFiniteLossError as exc:
        # preserve whatever the aborted phase completed
        if exc.rows:
            emit_report(exc.rows, out_dir)
        raise

    emit_report(rows, out_dir)
    _write_threshold_trace(dual, out_dir / "threshold.csv")
    _write_threshold_chart(dual, cfg.warmup_epochs, out_dir / "threshold.svg")
    report = classwise_report(dual, target)
    _write_classwise(report, out_dir / "classwise.csv")
    _write_features(dual, source, target, out_dir / "features.csv")
    save_checkpoint(dual.sdm, out_dir / "sdm.ckpt")
    save_checkpoint(dual.tdm, out_dir / "tdm.ckpt")

    last = rows[-1] if rows else MetricsRow(epoch=0)
    summary = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "warmup_epochs": cfg.warmup_epochs,
        "baseline": cfg.baseline,
        "baseline_source_acc": base.source_acc,
        "baseline_target_acc": base.target_acc,
        "acc_src_sd": last.acc_src_sd,
        "acc_src_td": last.acc_src_td,
        "acc_tgt_sd": last.acc_tgt_sd,
        "acc_tgt_td": last.acc_tgt_td,
        "acc_tgt_ens": last.acc_tgt_ens,
        "top_gap_classes": [[c, g] for c, g in report.top_gaps],
        "total_wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExperimentResult(cfg, base, dual, rows, summary)


def run_experiment(config_path, out_dir) -> int:
    """CLI-facing wrapper: returns a process exit status instead of raising."""
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = execute(cfg, out_dir)
    except NonFiniteLossError as exc:
        print(f"error: {exc} (partial metrics preserved in {out_dir})", file=sys.stderr)
        return 1
    except (ConfigError, CsvFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"ensemble target accuracy: {result.summary['acc_tgt_ens']:.4f} "
          f"(baseline {cfg.baseline}: {result.summary['baseline_target_acc']:.4f})")
    return 0
