"""Convert digit bitmaps into pen-stroke sequences.

Produces the JSON-lines stroke format consumed by tasks.read_stroke_jsonl:
per digit, a leading row with the absolute pen-start location, then unit
displacement rows (dx, dy in {-1, 0, 1}), an end-of-stroke row (eos) whenever
the pen lifts to a new stroke, and a final end-of-digit row (eod). x grows
with image columns and y against image rows (pen-up coordinates).

Tracing: threshold the image, skeletonize it (scikit-image), then repeatedly
walk unvisited skeleton pixels starting from endpoints, preferring to continue
straight; 8-connected moves become single displacement rows.
"""

from __future__ import annotations

import json

import numpy as np

Array = np.ndarray

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _skeletonize(binary: Array) -> Array:
    try:
        from skimage.morphology import skeletonize
    except ImportError as exc:  # pragma: no cover - environment-dependent
        raise ImportError(
            "stroke extraction needs scikit-image (pip install cllab[strokes])"
        ) from exc
    return skeletonize(binary)


def trace_strokes(image: Array, threshold: float = 0.5) -> list[tuple[int, int, int, int]]:
    """Stroke rows (dx, dy, eos, eod) for one grayscale digit image.

    The first row holds the absolute start location (x0, y0, 0, 0); callers
    that only want displacements drop it (the task loader does by default).
    Returns an empty list for blank images.
    """
    image = np.asarray(image, dtype=float)
    peak = image.max()
    if peak <= 0:
        return []
    skeleton = _skeletonize(image >= threshold * peak)
    remaining = {(int(r), int(c)) for r, c in zip(*np.nonzero(skeleton))}
    if not remaining:
        return []

    def neighbors(px):
        return [
            (px[0] + dr, px[1] + dc)
            for dr, dc in _NEIGHBORS
            if (px[0] + dr, px[1] + dc) in remaining
        ]

    rows: list[tuple[int, int, int, int]] = []
    start_of_digit = None
    prev_dir = None
    while remaining:
        # prefer endpoints (fewest unvisited neighbors), then top-left order
        start = min(remaining, key=lambda p: (len(neighbors(p)), p))
        if start_of_digit is None:
            start_of_digit = start
            rows.append((start[1], -start[0], 0, 0))
        else:
            rows.append((0, 0, 1, 0))  # pen lift
        cur = start
        remaining.discard(cur)
        prev_dir = None
        while True:
            options = neighbors(cur)
            if not options:
                break
            if prev_dir is not None:
                options.sort(
                    key=lambda p: -(
                        (p[0] - cur[0]) * prev_dir[0] + (p[1] - cur[1]) * prev_dir[1]
                    )
                )
            nxt = options[0]
            dr, dc = nxt[0] - cur[0], nxt[1] - cur[1]
            rows.append((dc, -dr, 0, 0))
            prev_dir = (dr, dc)
            remaining.discard(nxt)
            cur = nxt
    rows.append((0, 0, 0, 1))
    return rows


def stroke_record(label: int, rows: list[tuple[int, int, int, int]], split: str) -> dict:
    """One JSON-ready stroke record."""
    return {
        "label": int(label),
        "dx": [int(r[0]) for r in rows],
        "dy": [int(r[1]) for r in rows],
        "eos": [int(r[2]) for r in rows],
        "eod": [int(r[3]) for r in rows],
        "split": split,
    }


def write_stroke_jsonl(path, images, labels, splits, threshold: float = 0.5) -> int:
    """Trace every image and write JSON lines; returns the number written.

    Blank or untraceable images are skipped.
    """
    written = 0
    with open(path, "w") as fh:
        for image, label, split in zip(images, labels, splits):
            rows = trace_strokes(image, threshold)
            if len(rows) < 3:
                continue
            fh.write(json.dumps(stroke_record(label, rows, split)) + "\n")
            written += 1
    return written
