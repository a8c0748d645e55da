"""SVG timelines: one horizontal colour band per track (ground truth, then models)."""

from xml.sax.saxutils import escape

import numpy as np

from colontcn.data import LabelClass

# class -> colour, fixed so figures from different runs are comparable
CLASS_COLORS = {
    LabelClass.OUTSIDE: "#7f7f7f",
    LabelClass.INSERTION: "#1f77b4",
    LabelClass.CECUM: "#ff7f0e",
    LabelClass.ILEUM: "#d62728",
    LabelClass.ASCENDING: "#2ca02c",
    LabelClass.TRANSVERSE: "#9467bd",
    LabelClass.DESCENDING: "#8c564b",
    LabelClass.SIGMOID: "#e377c2",
    LabelClass.RECTUM: "#bcbd22",
    LabelClass.UNCERTAIN: "#ffffff",
}


def bands(labels):
    """Run-length ``(start, end_exclusive, label)`` triples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [labels.size]])
    return [(int(a), int(b), int(labels[a])) for a, b in zip(starts, ends)]


def render_svg(tracks, width=1000, band_height=24, gap=8, label_width=120):
    """SVG document for ``tracks``, a list of ``(name, labels)`` of equal length."""
    if not tracks:
        raise ValueError("nothing to render")
    T = len(tracks[0][1])
    for name, labels in tracks:
        if len(labels) != T:
            raise ValueError(f"track {name!r} has {len(labels)} frames, expected {T}")
    if T == 0:
        raise ValueError("empty tracks")
    scale = width / T
    legend_y = len(tracks) * (band_height + gap) + gap
    height = legend_y + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_width + width + 10}" '
        f'height="{height}" font-family="sans-serif" font-size="12">'
    ]
    for i, (name, labels) in enumerate(tracks):
        y = gap + i * (band_height + gap)
        out.append(f'<text x="4" y="{y + band_height * 0.7:.1f}">{escape(name)}</text>')
        out.append(f'<g class="track" data-name="{escape(name)}">')
        for a, b, lab in bands(labels):
            out.append(
                f'<rect x="{label_width + a * scale:.4f}" y="{y}" width="{(b - a) * scale:.4f}" '
                f'height="{band_height}" fill="{CLASS_COLORS[LabelClass(lab)]}" '
                f'data-start="{a}" data-end="{b}" data-label="{LabelClass(lab).canonical}"/>'
            )
        out.append("</g>")
    x = label_width
    for lab, color in CLASS_COLORS.items():
        out.append(f'<rect x="{x}" y="{legend_y}" width="10" height="10" fill="{color}" stroke="#000"/>')
        out.append(f'<text x="{x + 13}" y="{legend_y + 9}">{lab.canonical}</text>')
        x += 95
    out.append("</svg>")
    return "\n".join(out) + "\n"
