"""
CSV and plot emission for completed results directories.

emit_report only reads what a finished run left behind (manifest, train-log
CSVs, JSON reports) and writes CSV series under reports/ and SVG line plots
under plots/.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import orjson  # noqa: E402
from pydantic import TypeAdapter  # noqa: E402

from .manifest_manager import ManifestData, ManifestManager  # noqa: E402
from .models import EpochRecord, EvalPoint, MiaReport, ReinjectionReport, ScheduleSpec, TrainLog  # noqa: E402
from .schedule import schedule_trace  # noqa: E402


logger = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ["epoch", "loss", "ca", "asr", "seconds", "steps", "max_lr"]

plt.rcParams["svg.hashsalt"] = "backdoorlab"

_schedule_adapter = TypeAdapter(ScheduleSpec)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write rows under a header; None becomes an empty cell."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _opt_float(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def write_train_log(log: TrainLog, path: Path) -> Path:
    """One row per epoch; the epoch-0 baseline row carries only CA and ASR."""
    rows: list[list[Any]] = []
    if log.baseline is not None:
        rows.append([0, None, log.baseline.ca, log.baseline.asr, 0.0, 0, None])
    for r in log.epochs:
        rows.append([r.epoch, r.loss, r.ca, r.asr, r.seconds, r.steps, r.max_lr])
    return write_csv(path, TRAIN_LOG_FIELDS, rows)


def read_train_log(path: Path) -> TrainLog:
    baseline = None
    records = []
    for row in read_csv(path):
        epoch = int(row["epoch"])
        if epoch == 0:
            baseline = EvalPoint(ca=_opt_float(row["ca"]), asr=_opt_float(row["asr"]))
            continue
        records.append(EpochRecord(
            epoch=epoch,
            loss=float(row["loss"]),
            ca=_opt_float(row["ca"]),
            asr=_opt_float(row["asr"]),
            seconds=float(row["seconds"]),
            steps=int(row["steps"]),
            max_lr=float(row["max_lr"]),
        ))
    return TrainLog(baseline=baseline, epochs=records)


def _save_figure(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    return path


def _plot_lines(path: Path, title: str, xlabel: str, panels: dict[str, dict[str, tuple[list, list]]]) -> Path:
    """One subplot per panel, one line per series."""
    panels = panels or {"": {}}
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
    for ax, (ylabel, series) in zip(axes[0], panels.items()):
        for label, (xs, ys) in sorted(series.items()):
            ax.plot(xs, ys, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if series:
            ax.legend(fontsize="small")
    fig.suptitle(title)
    return _save_figure(fig, path)


def _load_json(path: Path) -> Any:
    return orjson.loads(path.read_bytes())


def _emit_asr_ca(results_dir: Path, manifest: ManifestData) -> list[Path]:
    rows = []
    ca_series: dict[str, tuple[list, list]] = {}
    asr_series: dict[str, tuple[list, list]] = {}
    for name, arm in sorted(manifest.arms.items()):
        log_path = arm.outputs.get("train_log")
        if log_path is None:
            continue
        log = read_train_log(results_dir / log_path)
        for r in log.epochs:
            rows.append([name, r.epoch, r.loss, r.ca, r.asr])
            if r.ca is not None:
                ca_series.setdefault(name, ([], []))[0].append(r.epoch)
                ca_series[name][1].append(r.ca)
            if r.asr is not None:
                asr_series.setdefault(name, ([], []))[0].append(r.epoch)
                asr_series[name][1].append(r.asr)
    csv_path = write_csv(results_dir / "reports" / "asr_ca.csv", ["arm", "epoch", "loss", "ca", "asr"], rows)
    plot = _plot_lines(results_dir / "plots" / "asr_ca.svg", "Defense fine-tuning", "epoch",
                       {"clean accuracy": ca_series, "attack success rate": asr_series})
    return [csv_path, plot]


def _emit_lr_trace(results_dir: Path, manifest: ManifestData) -> list[Path]:
    rows = []
    series: dict[str, tuple[list, list]] = {}
    for name, arm in sorted(manifest.arms.items()):
        details = arm.details
        if "schedule" not in details:
            continue
        spec = _schedule_adapter.validate_python(details["schedule"])
        trace = schedule_trace(spec, int(details["total_steps"]), int(details["steps_per_epoch"]))
        for step, lr in trace:
            rows.append([name, step, lr])
        series[name] = ([s for s, _ in trace], [lr for _, lr in trace])
    if not rows:
        return []
    csv_path = write_csv(results_dir / "reports" / "lr_trace.csv", ["arm", "step", "lr"], rows)
    plot = _plot_lines(results_dir / "plots" / "lr_trace.svg", "Learning-rate schedule", "step",
                       {"learning rate": series})
    return [csv_path, plot]


def _emit_mia(results_dir: Path, manifest: ManifestData) -> list[Path]:
    path = manifest.outputs.get("mia")
    if path is None:
        logger.warning("No membership-inference results to report", extra={"results_dir": str(results_dir)})
        return []
    reports = [MiaReport(**r) for r in _load_json(results_dir / path)]
    csv_path = write_csv(
        results_dir / "reports" / "mia.csv",
        ["target", "accuracy", "eval_size"],
        ([r.target_tag, r.accuracy, r.eval_size] for r in reports),
    )
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(reports)), 4))
    ax.bar(range(len(reports)), [r.accuracy for r in reports])
    ax.set_xticks(range(len(reports)))
    ax.set_xticklabels([r.target_tag for r in reports], rotation=45, ha="right", fontsize="small")
    ax.axhline(0.5, linestyle="--", linewidth=0.8, color="grey")
    ax.set_ylabel("membership inference accuracy")
    return [csv_path, _save_figure(fig, results_dir / "plots" / "mia.svg")]


def _emit_reinjection(results_dir: Path, manifest: ManifestData) -> list[Path]:
    path = manifest.outputs.get("reinjection")
    if path is None:
        logger.warning("No re-injection results to report", extra={"results_dir": str(results_dir)})
        return []
    reports = {arm: ReinjectionReport(**r) for arm, r in _load_json(results_dir / path).items()}
    curve_rows = []
    threshold_rows = []
    outputs = []
    for arm, report in sorted(reports.items()):
        panels: dict[str, dict[str, tuple[list, list]]] = {}
        for p in report.points:
            curve_rows.append([arm, p.start_model, p.ratio, p.epoch, p.asr, p.ca])
        for t in report.thresholds:
            threshold_rows.append([arm, t.start_model, t.ratio, t.epochs_to_threshold])
            points = report.series(t.start_model, t.ratio)
            panels.setdefault(f"ASR from {t.start_model} start", {})[f"ratio {t.ratio:g}"] = (
                [p.epoch for p in points], [p.asr for p in points]
            )
        outputs.append(_plot_lines(results_dir / "plots" / f"reinjection_{arm}.svg",
                                   f"Backdoor re-injection ({arm})", "epoch", panels))
    outputs.insert(0, write_csv(
        results_dir / "reports" / "reinjection.csv",
        ["arm", "start_model", "ratio", "epoch", "asr", "ca"], curve_rows,
    ))
    outputs.insert(1, write_csv(
        results_dir / "reports" / "reinjection_thresholds.csv",
        ["arm", "start_model", "ratio", "epochs_to_threshold"], threshold_rows,
    ))
    return outputs


def _emit_summary(results_dir: Path, manifest: ManifestData) -> list[Path]:
    path = manifest.outputs.get("eval_report")
    if path is None:
        logger.warning("No evaluation report to summarise", extra={"results_dir": str(results_dir)})
        return []
    records = _load_json(results_dir / path)
    if not records:
        return []
    header = list(records[0].keys())
    return [write_csv(results_dir / "reports" / "eval_summary.csv", header,
                      ([r[k] for k in header] for r in records))]


def emit_report(results_dir: Path) -> list[Path]:
    """
    Write CSV series and SVG plots for a completed results directory.

    Returns:
        Paths of every file written

    Raises:
        ManifestIncompleteError: If the run has not completed
    """
    manifest = ManifestManager(results_dir).load_complete()
    written: list[Path] = []
    written += _emit_asr_ca(results_dir, manifest)
    written += _emit_lr_trace(results_dir, manifest)
    written += _emit_mia(results_dir, manifest)
    written += _emit_reinjection(results_dir, manifest)
    written += _emit_summary(results_dir, manifest)
    logger.info("Report emitted", extra={"results_dir": str(results_dir), "files": len(written)})
    return written
