"""Dataset ingestion, metric computation and comparison-report rendering.

Accuracy thresholds use a strict inequality: a task counts toward Acc@t
only when its IoU is strictly greater than t. Predictions of "no box"
score 0 and stay in the denominator.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import BBox, iou

logger = logging.getLogger(__name__)

NWPU_CLASSES = {
    1: "airplane",
    2: "ship",
    3: "storage tank",
    4: "baseball diamond",
    5: "tennis court",
    6: "basketball court",
    7: "ground track field",
    8: "harbor",
    9: "bridge",
    10: "vehicle",
}

REPORT_FORMATS = ("table_text", "csv", "json")
CSV_HEADER = ["model", "dataset", "miou", "acc50", "acc70"]


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    image_path: str
    query: str
    truth_box: BBox
    dataset_tag: str
    obb_converted: bool = False


@dataclass
class MetricsReport:
    n_tasks: int
    n_scored: int
    miou: float
    acc_at: dict[float, float]
    per_task: list[tuple[str, float, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "n_scored": self.n_scored,
            "miou": self.miou,
            "acc_at": {f"{t:g}": v for t, v in sorted(self.acc_at.items())},
            "per_task": [
                {"task_id": tid, "iou": value, "provenance": prov}
                for tid, value, prov in self.per_task
            ],
        }


# ---------------------------------------------------------------------------
# Canonical task format
# ---------------------------------------------------------------------------

def load_canonical(path: str | Path) -> list[TaskRecord]:
    """Parse the canonical JSONL task format.

    Malformed lines and invalid boxes raise with line-numbered diagnostics;
    a missing image file is only a warning (checked later, at run time).
    """
    records: list[TaskRecord] = []
    problems: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                box = BBox.from_tuple(obj["bbox"])
                record = TaskRecord(
                    task_id=str(obj["task_id"]),
                    image_path=str(obj["image"]),
                    query=str(obj["query"]),
                    truth_box=box,
                    dataset_tag=str(obj.get("dataset", "unknown")),
                    obb_converted=bool(obj.get("obb_converted", False)),
                )
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            records.append(record)
    if problems:
        raise ValueError(f"{path}: {len(problems)} bad task line(s): " + "; ".join(problems))
    return records


def dump_canonical(records, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "task_id": r.task_id,
                "image": r.image_path,
                "query": r.query,
                "bbox": list(r.truth_box.as_tuple()),
                "dataset": r.dataset_tag,
            }
            if r.obb_converted:
                obj["obb_converted"] = True
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Dataset adapters
# ---------------------------------------------------------------------------

_NWPU_LINE = re.compile(
    r"\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*,\s*\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*,\s*(\d+)")


def adapt_nwpu(dir_path: str | Path) -> list[TaskRecord]:
    """Adapt a directory of NWPU-VHR-10 style ground-truth text files.

    Each line reads "(x1,y1),(x2,y2),class_id" with class ids 1..10. The
    dataset carries no referring expressions, so queries are synthesized
    from the class name. Images are looked up next to the annotations or in
    a sibling "positive image set" directory.
    """
    dir_path = Path(dir_path)
    image_dir = dir_path.parent / "positive image set"
    if not image_dir.is_dir():
        image_dir = dir_path
    records: list[TaskRecord] = []
    for txt in sorted(dir_path.glob("*.txt")):
        try:
            lines = txt.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            logger.error("skipping unreadable annotation file %s: %s", txt, exc)
            continue
        stem = txt.stem
        image_path = None
        for ext in (".jpg", ".png", ".jpeg"):
            cand = image_dir / (stem + ext)
            if cand.exists():
                image_path = cand
                break
        if image_path is None:
            image_path = image_dir / (stem + ".jpg")
            logger.warning("no image found for %s; recording %s", txt, image_path)
        n_in_file = 0
        for lineno, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            m = _NWPU_LINE.match(line)
            if not m:
                logger.warning("%s:%d: unparseable annotation %r", txt, lineno, line)
                continue
            x1, y1, x2, y2, cls = (int(g) for g in m.groups())
            if cls not in NWPU_CLASSES:
                logger.warning("%s:%d: class id %d outside 1..10, rejected",
                               txt, lineno, cls)
                continue
            try:
                box = BBox(x1, y1, x2, y2)
            except ValueError as exc:
                logger.warning("%s:%d: %s, rejected", txt, lineno, exc)
                continue
            n_in_file += 1
            records.append(TaskRecord(
                task_id=f"nwpu-{stem}-{n_in_file:03d}",
                image_path=str(image_path),
                query=f"the {NWPU_CLASSES[cls]}",
                truth_box=box,
                dataset_tag="nwpu-vhr-10",
            ))
    return records


def adapt_vrsbench(file_path: str | Path) -> list[TaskRecord]:
    """Adapt a VRSBench-style referring-expression annotation file (JSON).

    The file holds a list of referring records. Oriented boxes given as four
    corner points are converted to their enclosing axis-aligned box and the
    record is flagged obb_converted; records with an empty expression are
    rejected with a warning.
    """
    file_path = Path(file_path)
    with open(file_path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("annotations")
        if data is None:
            raise ValueError(f"{file_path}: missing field 'annotations'")
    records: list[TaskRecord] = []
    for i, entry in enumerate(data):
        image = entry.get("image") or entry.get("image_id")
        if image is None:
            raise ValueError(f"{file_path}: record {i} missing field 'image'")
        query = entry.get("referring") or entry.get("expression") or entry.get("query")
        if query is None:
            raise ValueError(f"{file_path}: record {i} missing field 'referring'")
        if not str(query).strip():
            logger.warning("%s: record %d has an empty expression, rejected", file_path, i)
            continue
        obb_converted = False
        if "obb" in entry:
            corners = entry["obb"]
            xs = [float(p[0]) for p in corners]
            ys = [float(p[1]) for p in corners]
            box = BBox(int(math.floor(min(xs))), int(math.floor(min(ys))),
                       int(math.floor(max(xs))) + 1, int(math.floor(max(ys))) + 1)
            obb_converted = True
        elif "bbox" in entry:
            box = BBox.from_tuple(entry["bbox"])
        else:
            raise ValueError(f"{file_path}: record {i} missing field 'bbox' or 'obb'")
        records.append(TaskRecord(
            task_id=str(entry.get("ref_id", f"vrsbench-{i:05d}")),
            image_path=str(image),
            query=str(query),
            truth_box=box,
            dataset_tag="vrsbench",
            obb_converted=obb_converted,
        ))
    return records


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_metrics(pairs, thresholds=(0.5, 0.7), *, task_ids=None,
                    provenances=None) -> MetricsReport:
    """Score (prediction, truth) pairs; prediction None means "no box".

    mIoU is the arithmetic mean over all pairs (no-box scoring 0); Acc@t is
    the fraction with IoU strictly greater than t.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot compute metrics over zero pairs")
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold {t} outside (0, 1)")
    if task_ids is None:
        task_ids = [f"task-{i}" for i in range(len(pairs))]
    if provenances is None:
        provenances = ["unknown"] * len(pairs)

    per_task: list[tuple[str, float, str]] = []
    ious: list[float] = []
    n_scored = 0
    for (pred, truth), tid, prov in zip(pairs, task_ids, provenances):
        if pred is None:
            value = 0.0
        else:
            value = iou(pred, truth)
            n_scored += 1
        ious.append(value)
        per_task.append((tid, value, prov))

    acc_at = {
        float(t): sum(1 for v in ious if v > t) / len(ious) for t in thresholds
    }
    return MetricsReport(
        n_tasks=len(pairs),
        n_scored=n_scored,
        miou=math.fsum(ious) / len(ious),
        acc_at=acc_at,
        per_task=per_task,
    )


# ---------------------------------------------------------------------------
# Result records (pipeline output JSONL)
# ---------------------------------------------------------------------------

def result_line(task_id: str, bbox: BBox | None, provenance: str,
                trace_digest: str, iou_value: float | None = None) -> str:
    obj: dict = {
        "task_id": task_id,
        "bbox": list(bbox.as_tuple()) if bbox is not None else None,
        "provenance": provenance,
    }
    if iou_value is not None:
        obj["iou"] = iou_value
    obj["trace_digest"] = trace_digest
    return json.dumps(obj)


def error_line(task_id: str, stage: str, message: str) -> str:
    return json.dumps({"task_id": task_id, "error": {"stage": stage, "message": message}})


def load_results(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.4f}"


def _columns(report: MetricsReport) -> list[float]:
    return [report.miou, report.acc_at.get(0.5, 0.0), report.acc_at.get(0.7, 0.0)]


def render_report(reports: dict[str, dict[str, MetricsReport]],
                  fmt: str = "table_text") -> str:
    """Render a model x dataset comparison.

    `reports` maps model name -> dataset tag -> MetricsReport. Rows keep
    input order; the best value in each numeric column is marked with `*`
    in the text format.
    """
    if not reports:
        raise ValueError("render_report needs at least one model")
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}")

    models = list(reports.keys())
    datasets: list[str] = []
    for per_model in reports.values():
        for ds in per_model.keys():
            if ds not in datasets:
                datasets.append(ds)

    if fmt == "json":
        return json.dumps({
            model: {ds: rep.to_dict() for ds, rep in per_model.items()}
            for model, per_model in reports.items()
        }, indent=2, sort_keys=False)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for model in models:
            for ds in datasets:
                rep = reports[model].get(ds)
                if rep is None:
                    continue
                writer.writerow([model, ds] + [_fmt(v) for v in _columns(rep)])
        return buf.getvalue()

    # fixed-width text table, one column group per dataset
    col_names = ["mIoU", "Acc@0.5", "Acc@0.7"]
    best: dict[tuple[str, int], float] = {}
    for ds in datasets:
        for k in range(3):
            vals = [_columns(reports[m][ds])[k] for m in models if ds in reports[m]]
            if vals:
                best[(ds, k)] = max(vals)

    header1 = ["model"]
    header2 = [""]
    for ds in datasets:
        header1 += [ds, "", ""]
        header2 += col_names
    rows = [header1, header2]
    for model in models:
        row = [model]
        for ds in datasets:
            rep = reports[model].get(ds)
            if rep is None:
                row += ["-", "-", "-"]
                continue
            for k, v in enumerate(_columns(rep)):
                cell = _fmt(v)
                if v == best[(ds, k)]:
                    cell += "*"
                row.append(cell)
        rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip())
    return "\n".join(lines) + "\n"
