"""Consolidated run reports: a comparison table plus criticality-map data.

A report root is any directory tree holding run directories (each with
``metrics.jsonl`` and ``plan.json``) and score directories (each with
``criticality.csv``, ``summary.json`` and ``bottleneck.json``).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import plotting
from .errors import ArtifactError
from .train import read_metrics

RUN_FILES = ("metrics.jsonl", "plan.json")
SCORE_FILES = ("criticality.csv", "summary.json", "bottleneck.json")


def _label(path: Path, root: Path):
    rel = path.relative_to(root).as_posix()
    return rel if rel != "." else root.name


def find_dirs(root, marker):
    root = Path(root)
    return sorted({p.parent for p in root.rglob(marker)}, key=lambda p: p.as_posix())


def load_run(path: Path, root: Path):
    plan = json.loads((path / "plan.json").read_text())
    records = read_metrics(path / "metrics.jsonl")
    if not records:
        raise ArtifactError(f"{path / 'metrics.jsonl'} holds no epoch records")
    final = records[-1]
    clean, robust = final.get("clean_acc"), final.get("robust_acc") or {}
    eval_path = path / "eval.json"
    if eval_path.is_file():
        result = json.loads(eval_path.read_text())
        clean, robust = result["clean_acc"], result["robust_acc"]
    meta = plan.get("meta", {})
    return {
        "run": _label(path, root),
        "mode": meta.get("mode", "unknown"),
        "tuned_params": int(plan["trainable_params"]),
        "total_params": int(plan["total_params"]),
        "tuned_params_M": plan["trainable_params"] / 1e6,
        "tuned_total_pct": 100.0 * plan["trainable_params"] / plan["total_params"],
        "clean_acc": clean,
        "robust_acc": dict(robust),
        "epochs": len(records),
        "sample_count": meta.get("sample_count"),
    }


def load_score(path: Path, root: Path):
    summary = json.loads((path / "summary.json").read_text())
    bottleneck = json.loads((path / "bottleneck.json").read_text())
    return {
        "label": _label(path, root),
        "budget": summary["attack"]["budget"],
        "sample_count": summary["sample_count"],
        "tau": summary["tau"],
        "per_matrix": summary["per_matrix"],
        "sizes": summary["sizes"],
        "indices": np.asarray(bottleneck["indices"], dtype=np.int64),
    }


def collect(root):
    """Load every run and score directory under ``root``.

    Raises :class:`ArtifactError` naming each missing artifact when the tree
    lacks runs, lacks criticality output, or holds half-written directories.
    """
    root = Path(root)
    if not root.is_dir():
        raise ArtifactError(f"report root {root} is not a directory")
    missing = []
    run_dirs = sorted(set(find_dirs(root, "metrics.jsonl")) | set(find_dirs(root, "plan.json")),
                      key=lambda p: p.as_posix())
    score_dirs = sorted({d for name in SCORE_FILES for d in find_dirs(root, name)},
                        key=lambda p: p.as_posix())
    if not run_dirs:
        missing += [f"{root}/<run>/{name}" for name in RUN_FILES]
    if not score_dirs:
        missing.append(f"{root}/<score>/criticality.csv")
    for d in run_dirs:
        missing += [str(d / n) for n in RUN_FILES if not (d / n).is_file()]
    for d in score_dirs:
        missing += [str(d / n) for n in SCORE_FILES if not (d / n).is_file()]
    if missing:
        raise ArtifactError("incomplete run directory; missing artifacts:\n  " + "\n  ".join(missing))
    return [load_run(d, root) for d in run_dirs], [load_score(d, root) for d in score_dirs]


def attack_names(runs):
    names = []
    for r in runs:
        names += [a for a in r["robust_acc"] if a not in names]
    return names


def _fmt(value, spec=".2f"):
    return "-" if value is None else format(value, spec)


def comparison_table(runs, attacks):
    header = ["run", "mode", "tuned_params_M", "tuned_total_pct", "clean_acc"] + attacks
    rows = []
    for r in runs:
        rows.append([r["run"], r["mode"], f"{r['tuned_params_M']:.4f}",
                     f"{r['tuned_total_pct']:.2f}", _fmt(r["clean_acc"])]
                    + [_fmt(r["robust_acc"].get(a)) for a in attacks])
    return header, rows


def render_table(header, rows):
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out)


def module_grid(per_matrix, sizes):
    """Fold per-tensor counts into a (row, module) density grid in percent.

    Rows are ``stem`` (embeddings), one per block, and ``top`` (final norm
    and head); weight and bias of a module are pooled.
    """
    cells = {}
    for path, count in per_matrix.items():
        module = path.rsplit(".", 1)[0] if path.endswith((".weight", ".bias")) else path
        if module.startswith("blocks."):
            _, idx, rest = module.split(".", 2)
            row, col = f"block {idx}", rest
        elif module in ("norm", "head"):
            row, col = "top", module
        else:
            row, col = "stem", module
        c, n = cells.get((row, col), (0, 0))
        cells[(row, col)] = (c + count, n + sizes[path])
    block_rows = sorted({r for r, _ in cells if r.startswith("block ")}, key=lambda r: int(r.split()[1]))
    rows = [r for r in ["stem"] + block_rows + ["top"] if any(k[0] == r for k in cells)]
    cols = []
    for r in rows:
        cols += [c for (rr, c) in cells if rr == r and c not in cols]
    grid = np.full((len(rows), len(cols)), np.nan)
    for (r, c), (count, n) in cells.items():
        grid[rows.index(r), cols.index(c)] = 100.0 * count / n
    return rows, cols, grid


def _jaccard(a, b):
    union = np.union1d(a, b)
    return 1.0 if not len(union) else len(np.intersect1d(a, b)) / len(union)


def sample_count_grid(runs, scores):
    """Accuracy and selection overlap against the scoring sample count, when varied."""
    grid = {}
    caat = [r for r in runs if r["sample_count"] is not None and r["mode"] in ("caat", "mask-only")]
    if len({r["sample_count"] for r in caat}) > 1:
        grid["accuracy"] = [
            {"sample_count": r["sample_count"], "run": r["run"], "clean_acc": r["clean_acc"],
             "robust_acc": r["robust_acc"]}
            for r in sorted(caat, key=lambda r: (r["sample_count"], r["run"]))]
    counts = sorted({s["sample_count"] for s in scores})
    if len(counts) > 1:
        ref = max(scores, key=lambda s: (s["sample_count"], s["label"]))
        grid["overlap"] = [
            {"sample_count": s["sample_count"], "score": s["label"],
             "jaccard_vs_largest": _jaccard(s["indices"], ref["indices"])}
            for s in sorted(scores, key=lambda s: (s["sample_count"], s["label"]))]
    return grid


def _safe(label):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def build_report(root, out_dir=None):
    """Write report.txt/json/csv, map CSVs and PNG figures; return written paths."""
    root = Path(root)
    out_dir = Path(out_dir) if out_dir else root
    out_dir.mkdir(parents=True, exist_ok=True)
    runs, scores = collect(root)
    attacks = attack_names(runs)
    header, rows = comparison_table(runs, attacks)
    written = []

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    (out_dir / "report.csv").write_text(buf.getvalue())
    written.append(out_dir / "report.csv")

    maps = []
    for s in scores:
        map_rows, map_cols, grid = module_grid(s["per_matrix"], s["sizes"])
        stem = f"criticality_map_{_safe(s['label'])}"
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row"] + map_cols)
            for name, values in zip(map_rows, grid):
                w.writerow([name] + ["" if np.isnan(v) else repr(float(v)) for v in values])
        title = f"budget {s['budget']:.4g}, {s['sample_count']} samples"
        plotting.criticality_map(grid, map_rows, map_cols, out_dir / f"{stem}.png", title)
        written += [out_dir / f"{stem}.csv", out_dir / f"{stem}.png"]
        maps.append({"score": s["label"], "budget": s["budget"], "sample_count": s["sample_count"],
                     "tau": s["tau"], "rows": map_rows, "cols": map_cols,
                     "density_pct": [[None if np.isnan(v) else float(v) for v in r] for r in grid]})

    plotting.accuracy_vs_fraction(runs, attacks, out_dir / "accuracy_vs_fraction.png")
    written.append(out_dir / "accuracy_vs_fraction.png")

    grid = sample_count_grid(runs, scores)
    if "overlap" in grid:
        counts = [g["sample_count"] for g in grid["overlap"]]
        values = [g["jaccard_vs_largest"] for g in grid["overlap"]]
        plotting.sample_count_grid(counts, values, out_dir / "sample_count_overlap.png",
                                   "Jaccard overlap vs largest")
        written.append(out_dir / "sample_count_overlap.png")
    if "accuracy" in grid and attacks:
        counts = [g["sample_count"] for g in grid["accuracy"]]
        values = [g["robust_acc"].get(attacks[0]) for g in grid["accuracy"]]
        plotting.sample_count_grid(counts, values, out_dir / "sample_count_accuracy.png",
                                   f"{attacks[0]} accuracy (%)")
        written.append(out_dir / "sample_count_accuracy.png")

    document = {"runs": [{k: v for k, v in r.items()} for r in runs], "attacks": attacks,
                "criticality_maps": maps, "sample_count_grid": grid}
    (out_dir / "report.json").write_text(json.dumps(document, indent=1, sort_keys=True) + "\n")
    written.append(out_dir / "report.json")

    text = ["Run comparison", "", render_table(header, rows), ""]
    for m in maps:
        text.append(f"Criticality map: {m['score']} (budget {m['budget']:.4g}, "
                    f"{m['sample_count']} samples, tau {m['tau']})")
        cells = [[r] + [_fmt(v, ".1f") for v in vals] for r, vals in zip(m["rows"], m["density_pct"])]
        text += [render_table(["row"] + m["cols"], cells), ""]
    if "accuracy" in grid:
        text.append("Sample-count grid (accuracy)")
        cells = [[g["sample_count"], g["run"], _fmt(g["clean_acc"])]
                 + [_fmt(g["robust_acc"].get(a)) for a in attacks] for g in grid["accuracy"]]
        text += [render_table(["samples", "run", "clean_acc"] + attacks, cells), ""]
    if "overlap" in grid:
        text.append("Sample-count grid (bottleneck overlap)")
        cells = [[g["sample_count"], g["score"], f"{g['jaccard_vs_largest']:.3f}"]
                 for g in grid["overlap"]]
        text += [render_table(["samples", "score", "jaccard_vs_largest"], cells), ""]
    (out_dir / "report.txt").write_text("\n".join(text))
    written.append(out_dir / "report.txt")
    return written
