"""Report emission: JSON (schema-checked), CSV tables and SVG sweep charts."""

import csv
import json
import os
from importlib import resources

import jsonschema

CSV_FIELDS = ["run_id", "seed", "model", "attack", "param", "cda_before", "cda_after",
              "wacc_before", "wacc_after", "spec"]
SWEEP_FIELDS = ["run_id", "seed", "model", "sigma", "cda", "wacc"]
ABLATION_FIELDS = ["run_id", "seed", "label", "sigma_mode", "sigma", "cda", "wacc", "spec",
                   "converged_fraction"]


def load_schema():
    text = resources.files("sewlab.eval").joinpath("report_schema.json").read_text()
    return json.loads(text)


def validate(doc):
    """Raise jsonschema.ValidationError if ``doc`` does not fit the report schema."""
    jsonschema.validate(doc, load_schema())


def report_json(report):
    doc = report.to_dict() if hasattr(report, "to_dict") else report
    validate(doc)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def csv_rows(report):
    """One row per model x attack cell; attack 'none' carries the unattacked model."""
    d = report.to_dict() if hasattr(report, "to_dict") else report
    base = {"run_id": d["run_id"], "seed": d["seed"]}
    rows = [dict(base, model="clean", attack="none", param=0.0,
                 cda_before=d["clean"]["cda"], cda_after=d["clean"]["cda"],
                 wacc_before=d["clean"]["wacc"], wacc_after=d["clean"]["wacc"], spec="")]
    for name, m in d["models"].items():
        rows.append(dict(base, model=name, attack="none", param=0.0,
                         cda_before=m["cda"], cda_after=m["cda"],
                         wacc_before=m["wacc"], wacc_after=m["wacc"], spec=m["spec"]["spec"]))
    for r in d["attacks"]:
        rows.append(dict(base, **{k: r[k] for k in CSV_FIELDS[2:-1]},
                         spec=d["models"][r["model"]]["spec"]["spec"]))
    return rows


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path):
    """Parse a CSV written by emit_report, turning numeric cells back into numbers."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


def sweep_svg(rows, title, width=480, height=320):
    """Line chart of accuracy against noise level: one polyline per metric."""
    left, right, top, bottom = 56, 20, 36, 44
    pw, ph = width - left - right, height - top - bottom
    sigmas = [r["sigma"] for r in rows]
    smax = max(sigmas) or 1.0

    def xy(s, acc):
        return left + pw * s / smax, top + ph * (1.0 - acc / 100.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<title>{title}</title>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">noise std</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">accuracy (%)</text>',
    ]
    for acc in (0, 50, 100):
        _, y = xy(0, acc)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{acc}</text>')
    for s in sigmas:
        x, _ = xy(s, 0)
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{s:g}</text>')
    colors = {"cda": "#1f77b4", "wacc": "#d62728"}
    for i, metric in enumerate(("cda", "wacc")):
        pts = [xy(r["sigma"], r[metric]) for r in rows]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        parts.append(f'<polyline data-metric="{metric}" fill="none" stroke="{colors[metric]}" '
                     f'stroke-width="2" points="{path}"/>')
        for (x, y), r in zip(pts, rows):
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colors[metric]}"/>')
            parts.append(f'<text class="point" data-metric="{metric}" data-sigma="{r["sigma"]!r}" '
                         f'x="{x:.2f}" y="{y - 6 - 10 * i:.2f}" text-anchor="middle" '
                         f'fill="{colors[metric]}">{r[metric]:.1f}</text>')
        ly = top + 14 * i
        parts.append(f'<text x="{left + pw - 4}" y="{ly + 4}" text-anchor="end" '
                     f'fill="{colors[metric]}">{metric.upper()}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report, out_dir, formats=("json", "csv", "svg")):
    """Write the report into ``out_dir``; returns the paths written."""
    d = report.to_dict() if hasattr(report, "to_dict") else report
    os.makedirs(out_dir, exist_ok=True)
    written = []
    stem = f"{d['run_id']}_seed{d['seed']}"
    if "json" in formats:
        path = os.path.join(out_dir, f"{stem}.json")
        with open(path, "w") as fh:
            fh.write(report_json(d))
        written.append(path)
    if "csv" in formats:
        path = os.path.join(out_dir, f"{stem}.csv")
        _write_csv(path, CSV_FIELDS, csv_rows(d))
        written.append(path)
        base = {"run_id": d["run_id"], "seed": d["seed"]}
        sweep = [dict(base, model=m, **r) for m, rows in d["sweeps"].items() for r in rows]
        path = os.path.join(out_dir, f"{stem}_sweep.csv")
        _write_csv(path, SWEEP_FIELDS, sweep)
        written.append(path)
        path = os.path.join(out_dir, f"{stem}_ablation.csv")
        _write_csv(path, ABLATION_FIELDS, [dict(base, **r) for r in d["ablation"]])
        written.append(path)
    if "svg" in formats:
        for m, rows in d["sweeps"].items():
            if not rows:
                continue
            path = os.path.join(out_dir, f"{stem}_sweep_{m}.svg")
            with open(path, "w") as fh:
                fh.write(sweep_svg(rows, f"{m}: accuracy under input noise"))
            written.append(path)
    return written
