"""Grayscale SVG heatmaps of per-layer expert utilization.

One grid per MoE layer: rows are datasets, columns are experts, and each
cell is a single rect whose darkness is the mean gate probability, so a
well-aligned router shows up as a dark diagonal.  Rendered with the stdlib
XML tools only; every run of the same matrices produces identical bytes.
"""

from __future__ import annotations

from xml.etree import ElementTree as ET

from .errors import ParameterError

CELL = 28
PAD_LEFT = 72
PAD_TOP = 46
GAP = 30
FONT = 12

SVG_NS = "http://www.w3.org/2000/svg"


def _gray(weight: float) -> str:
    w = min(max(float(weight), 0.0), 1.0)
    level = int(round(255 * (1.0 - w)))
    return f"#{level:02x}{level:02x}{level:02x}"


def _text(parent, x, y, content, anchor="middle"):
    el = ET.SubElement(parent, "text")
    el.set("x", str(x))
    el.set("y", str(y))
    el.set("font-family", "monospace")
    el.set("font-size", str(FONT))
    el.set("text-anchor", anchor)
    el.text = content
    return el


def utilization_svg(utilization: dict) -> str:
    """Render {block -> Utilization} as one SVG document.

    Exactly |D| x E rect elements appear per layer; a dataset with no
    tokens in the evaluated batch keeps its row of cells, drawn hollow
    with a dashed outline instead of a fill.
    """
    if not utilization:
        raise ParameterError("no utilization matrices to render")
    blocks = sorted(utilization)
    first = utilization[blocks[0]]
    num_datasets = len(first.datasets)
    num_experts = first.matrix.shape[1]

    grid_h = num_datasets * CELL
    width = PAD_LEFT + num_experts * CELL + 24
    height = PAD_TOP + len(blocks) * (grid_h + GAP)

    root = ET.Element("svg")
    root.set("xmlns", SVG_NS)
    root.set("width", str(width))
    root.set("height", str(height))
    root.set("viewBox", f"0 0 {width} {height}")

    _text(root, width // 2, 18, "expert utilization (dark = high weight)")

    for row, block in enumerate(blocks):
        util = utilization[block]
        top = PAD_TOP + row * (grid_h + GAP)
        _text(root, PAD_LEFT, top - 18, f"layer {block}", anchor="start")
        for e in range(num_experts):
            _text(root, PAD_LEFT + e * CELL + CELL // 2, top - 5, f"e{e}")
        for i, dataset in enumerate(util.datasets):
            y = top + i * CELL
            _text(root, PAD_LEFT - 8, y + CELL // 2 + FONT // 2 - 1,
                  f"d{dataset}", anchor="end")
            for e in range(num_experts):
                rect = ET.SubElement(root, "rect")
                rect.set("x", str(PAD_LEFT + e * CELL))
                rect.set("y", str(y))
                rect.set("width", str(CELL))
                rect.set("height", str(CELL))
                if util.present[i]:
                    rect.set("fill", _gray(util.matrix[i, e]))
                    rect.set("stroke", "#808080")
                else:
                    rect.set("fill", "none")
                    rect.set("stroke", "#808080")
                    rect.set("stroke-dasharray", "3 2")
            if not util.present[i]:
                _text(root, PAD_LEFT + num_experts * CELL + 6,
                      y + CELL // 2 + FONT // 2 - 1, "absent", anchor="start")

    return ET.tostring(root, encoding="unicode") + "\n"


def write_heatmap_svg(utilization: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(utilization_svg(utilization))
