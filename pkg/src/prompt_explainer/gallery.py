"""Self-contained HTML page summarizing a run directory's report.json."""
from __future__ import annotations

import base64
import html
from pathlib import Path

from .runs import load_report


def _img(root: Path, rel_path: str, size: int = 96) -> str:
    data = base64.b64encode((root / rel_path).read_bytes()).decode("ascii")
    return (f'<img src="data:image/png;base64,{data}" width="{size}" height="{size}" '
            f'title="{html.escape(rel_path)}" style="image-rendering:pixelated">')


def _num(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


def render_gallery(run_dir: str | Path, max_images: int = 10) -> str:
    root = Path(run_dir)
    report = load_report(root)
    e = html.escape
    out = ["<!doctype html>", "<html><head><meta charset='utf-8'>",
           f"<title>{e(report['command'])} seed {report['seed']}</title>",
           "<style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
           "td,th{border:1px solid #ccc;padding:4px 8px}.core{color:#070}.spurious{color:#a00}"
           ".inconclusive{color:#777}</style></head><body>",
           f"<h1>{e(report['command'])}</h1>",
           f"<p>backend <code>{e(report['backend']['id'])}</code>, seed {report['seed']}</p>"]

    runs = report.get("runs", [])
    if runs:
        out.append("<h2>Optimized prompts</h2><table><tr><th>run</th><th>objective</th>"
                   "<th>template</th><th>text</th><th>held-out loss</th><th>restart</th></tr>")
        for r in runs:
            out.append(f"<tr><td>{e(r['name'])}</td><td>{e(r['objective'])}</td><td>{e(r['template'])}</td>"
                       f"<td>{e(r.get('text') or '')}</td><td>{_num(r['heldout_loss'])}</td>"
                       f"<td>{r['selected_restart']}</td></tr>")
        out.append("</table>")

    for s in report.get("samples", []):
        out.append(f"<h2>Samples: {e(s['name'])}</h2>")
        if s["scores"]:
            out.append("<p>" + ", ".join(f"{e(k)} mean {_num(v['mean'])}" for k, v in s["scores"].items()) + "</p>")
        out.append("<div>" + "".join(_img(root, p) for p in s["artifacts"]["images"][:max_images]) + "</div>")

    disc = report.get("discovery")
    if disc:
        out.append(f"<h2>Feature audit</h2><p>delta = {disc['delta']}, {disc['n_samples']} samples per feature, "
                   f"lambda = {disc['lambda']}, ranking: {e(disc['ranking_method'])}</p>")
        out.append("<table><tr><th>class</th><th>feature</th><th>rank</th><th>mean r</th>"
                   "<th>verdict</th><th>samples</th><th>masks</th></tr>")
        for a in disc["audits"]:
            arts = a["artifacts"]
            imgs = "".join(_img(root, p, 48) for p in arts.get("images", [])[:max_images])
            masks = "".join(_img(root, p, 48) for p in arts.get("masks", [])[:max_images])
            out.append(f"<tr><td>{a['class']} {e(a['class_name'])}</td><td>{a['feature']}</td><td>{a['rank']}</td>"
                       f"<td>{_num(a['mean_r'])}</td><td class='{a['verdict']}'>{a['verdict']}</td>"
                       f"<td>{imgs}</td><td>{masks}</td></tr>")
        out.append("</table>")

    agr = report.get("agreement")
    if agr:
        out.append(f"<h2>Agreement</h2><p>overall {_num(agr['overall'])} over {agr['n']} pairs</p><table>")
        for k, v in agr["by_bias"].items():
            out.append(f"<tr><td>{e(k)}</td><td>{_num(v)}</td></tr>")
        for k, v in agr["by_animacy"].items():
            out.append(f"<tr><td>{e(k)}</td><td>{_num(v)}</td></tr>")
        out.append("</table>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"
