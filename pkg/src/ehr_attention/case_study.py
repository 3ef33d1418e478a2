"""Per-patient explanation export: top-20 tokens, cohort context and SVG panels.

Aggregated tokens get a cohort histogram with the patient's value marked.
Vital tokens are grouped by channel; each channel panel shows per-hour cohort
box statistics with the patient's 24 values overlaid and the important hours
drawn in red.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .dataset import N_HOURS, N_VITAL_TOKENS, Cohort
from .explain import attention_importance
from .models import MortalityModel

TOP_K = 20
HIST_BINS = 20

# vital panel geometry (pixels)
PANEL_W = 480
PANEL_H = 240
MARGIN = 40


@dataclass
class VitalPanel:
    channel: int
    channel_name: str
    tokens: list[int]
    flagged_hours: list[int]
    values: list[float]
    box: list[dict]  # one {hour, min, q1, median, q3, max} per hour

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "channel_name": self.channel_name,
            "tokens": self.tokens,
            "flagged_hours": self.flagged_hours,
            "values": self.values,
            "box": self.box,
        }


@dataclass
class FeaturePanel:
    token: int
    feature: int
    feature_name: str
    value: float
    edges: list[float]
    counts: list[int]

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "feature": self.feature,
            "feature_name": self.feature_name,
            "value": self.value,
            "edges": self.edges,
            "counts": self.counts,
        }


@dataclass
class CaseStudyExport:
    stay_id: str
    label: int
    top_tokens: list[dict]  # {index, name, kind, score} by descending score
    feature_panels: list[FeaturePanel] = field(default_factory=list)
    vital_panels: list[VitalPanel] = field(default_factory=list)
    stamp: dict = field(default_factory=dict)  # {tool_version, config_hash, seed} when run from a config

    def flagged_hours(self) -> list[int]:
        return sorted({h for p in self.vital_panels for h in p.flagged_hours})

    def to_dict(self) -> dict:
        head = {"stamp": self.stamp} if self.stamp else {}
        return {
            **head,
            "stay_id": self.stay_id,
            "label": self.label,
            "top_tokens": self.top_tokens,
            "feature_panels": [p.to_dict() for p in self.feature_panels],
            "vital_panels": [p.to_dict() for p in self.vital_panels],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CaseStudyExport":
        obj = json.loads(text)
        return cls(
            stay_id=obj["stay_id"],
            label=obj["label"],
            top_tokens=obj["top_tokens"],
            feature_panels=[FeaturePanel(**p) for p in obj["feature_panels"]],
            vital_panels=[VitalPanel(**p) for p in obj["vital_panels"]],
            stamp=obj.get("stamp", {}),
        )


def _token_name(cohort: Cohort, t: int) -> str:
    if t < N_VITAL_TOKENS:
        c, h = divmod(t, N_HOURS)
        return f"{cohort.channel_names[c]}@h{h + 1}"
    return cohort.feature_names[t - N_VITAL_TOKENS]


def _box_stats(column: np.ndarray) -> list[float]:
    q = np.nanpercentile(column, [0, 25, 50, 75, 100])
    return [float(v) for v in q]


def build_case_study(
    cohort: Cohort, stay_id: str, scores: np.ndarray, k: int = TOP_K, reference: Cohort | None = None
) -> CaseStudyExport:
    """Assemble the export from precomputed 364 token scores.

    Distributions come from ``reference`` (default: ``cohort`` itself).
    """
    rec = cohort.record(cohort.index_of(stay_id))
    ref = cohort if reference is None else reference
    order = np.argsort(-np.asarray(scores), kind="stable")[:k]
    top = []
    vital_by_channel: dict[int, list[int]] = {}
    feature_panels = []
    for t in (int(x) for x in order):
        kind = "vital" if t < N_VITAL_TOKENS else "aggregated"
        top.append({"index": t, "name": _token_name(cohort, t), "kind": kind, "score": float(scores[t])})
        if kind == "vital":
            vital_by_channel.setdefault(t // N_HOURS, []).append(t)
        else:
            f = t - N_VITAL_TOKENS
            counts, edges = np.histogram(ref.aggregated[:, f], bins=HIST_BINS, range=(0.0, 1.0))
            feature_panels.append(
                FeaturePanel(
                    token=t,
                    feature=f,
                    feature_name=cohort.feature_names[f],
                    value=float(rec.aggregated[f]),
                    edges=[float(e) for e in edges],
                    counts=[int(n) for n in counts],
                )
            )
    vital_panels = []
    for c in sorted(vital_by_channel):
        toks = sorted(vital_by_channel[c])
        box = []
        for h in range(N_HOURS):
            mn, q1, med, q3, mx = _box_stats(ref.vitals[:, c, h])
            box.append({"hour": h + 1, "min": mn, "q1": q1, "median": med, "q3": q3, "max": mx})
        vital_panels.append(
            VitalPanel(
                channel=c,
                channel_name=cohort.channel_names[c],
                tokens=toks,
                flagged_hours=[t % N_HOURS + 1 for t in toks],
                values=[float(v) for v in rec.vitals[c]],
                box=box,
            )
        )
    return CaseStudyExport(rec.stay_id, rec.label, top, feature_panels, vital_panels)


def export_case_study(
    model: MortalityModel,
    cohort: Cohort,
    stay_id: str,
    out_dir: str | Path | None = None,
    reference: Cohort | None = None,
    stamp: dict | None = None,
) -> CaseStudyExport:
    """Rank tokens by fusion attention for one stay and build (and optionally write) the export."""
    rec = cohort.record(cohort.index_of(stay_id))
    attr = attention_importance(model, rec)
    export = build_case_study(cohort, stay_id, attr.scores, reference=reference)
    export.stamp = dict(stamp or {})
    if out_dir is not None:
        write_case_study(export, out_dir)
    return export


def write_case_study(export: CaseStudyExport, out_dir: str | Path) -> list[Path]:
    """Write case_study.json plus one SVG per panel; the stamp goes into each SVG as a comment."""
    comment = " ".join(f"{k}={v}" for k, v in export.stamp.items()) or None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "case_study.json"]
    paths[0].write_text(export.to_json())
    for p in export.vital_panels:
        path = out / f"vital_{p.channel}_{p.channel_name}.svg"
        path.write_text(render_vital_panel(p, comment))
        paths.append(path)
    for p in export.feature_panels:
        path = out / f"feature_{p.feature}.svg"
        path.write_text(render_feature_panel(p, comment))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def overlay_position(hour: int, value: float) -> tuple[float, float]:
    """Pixel centre of the patient marker for ``hour`` (1-based) at ``value`` in [0, 1]."""
    step = (PANEL_W - 2 * MARGIN) / N_HOURS
    x = MARGIN + (hour - 0.5) * step
    y = MARGIN + (1.0 - value) * (PANEL_H - 2 * MARGIN)
    return round(x, 3), round(y, 3)


def _y(value: float) -> float:
    return overlay_position(1, value)[1]


def _svg(body: list[str], title: str, comment: str | None = None) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{PANEL_H}" '
        f'viewBox="0 0 {PANEL_W} {PANEL_H}">'
    )
    t = f'<text x="{MARGIN}" y="{MARGIN / 2:.1f}" font-size="12">{escape(title)}</text>'
    lines = [head] + ([f"<!-- {escape(comment)} -->"] if comment else []) + [t, *body, "</svg>"]
    return "\n".join(lines) + "\n"


def render_vital_panel(panel: VitalPanel, comment: str | None = None) -> str:
    step = (PANEL_W - 2 * MARGIN) / N_HOURS
    flagged = set(panel.flagged_hours)
    body = []
    for b in panel.box:
        x, _ = overlay_position(b["hour"], 0.0)
        half = step * 0.3
        body.append(
            f'<line x1="{x}" y1="{_y(b["min"])}" x2="{x}" y2="{_y(b["max"])}" stroke="#888"/>'
        )
        body.append(
            f'<rect x="{x - half:.3f}" y="{_y(b["q3"])}" width="{2 * half:.3f}" '
            f'height="{_y(b["q1"]) - _y(b["q3"]):.3f}" fill="#ddd" stroke="#888"/>'
        )
        body.append(
            f'<line x1="{x - half:.3f}" y1="{_y(b["median"])}" x2="{x + half:.3f}" '
            f'y2="{_y(b["median"])}" stroke="#444"/>'
        )
    for h, v in enumerate(panel.values, start=1):
        x, y = overlay_position(h, v)
        color = "red" if h in flagged else "black"
        mark = ' data-flagged="1"' if h in flagged else ""
        body.append(
            f'<circle cx="{x}" cy="{y}" r="3" fill="{color}" data-hour="{h}" data-value="{v!r}"{mark}/>'
        )
    return _svg(body, f"{panel.channel_name} (hours {', '.join(map(str, panel.flagged_hours))})", comment)


def render_feature_panel(panel: FeaturePanel, comment: str | None = None) -> str:
    width = PANEL_W - 2 * MARGIN
    height = PANEL_H - 2 * MARGIN
    top = max(panel.counts) or 1
    bw = width / len(panel.counts)
    body = []
    for i, n in enumerate(panel.counts):
        h = height * n / top
        body.append(
            f'<rect x="{MARGIN + i * bw:.3f}" y="{MARGIN + height - h:.3f}" width="{bw:.3f}" '
            f'height="{h:.3f}" fill="#bbb" stroke="#888"/>'
        )
    x = MARGIN + min(max(panel.value, 0.0), 1.0) * width
    body.append(
        f'<line x1="{x:.3f}" y1="{MARGIN}" x2="{x:.3f}" y2="{MARGIN + height}" stroke="red" '
        f'stroke-width="2" data-value="{panel.value!r}"/>'
    )
    return _svg(body, panel.feature_name, comment)
