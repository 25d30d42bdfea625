"""Model-independent scoring of generated latents.

Each task family is scored by inverting its templated instruction (plus
the record's input latents) into the expected scene and comparing the
decoded generation against it.  Nothing here reads model internals.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_fill_holes

from .codec import LatentCodec
from .scenes import (PALETTE, PALETTE_NAMES, POSITIONS, BLACK, ObjectSpec,
                     cell_bounds, classify_palette, classify_shape,
                     dominant_color_name, object_support, objectish,
                     occupied_cells)
from .sequence import TaskRecord

from . import dataset as ds

UNCHANGED_TOL = 0.25      # per-cell |gen - input| bound for preservation
CHANGED_DETECT_TOL = 1e-3  # |input - target| above this marks a should-change cell
MOVE_MARGIN = 0.75        # moved toward target: |gen - target| < margin * |input - target|


def oracle_score(record: TaskRecord, generated: np.ndarray,
                 codec: LatentCodec | None = None) -> dict[str, float]:
    """Metrics in [0, 1] for `generated` against the record's expectation."""
    codec = codec or LatentCodec()
    if generated.shape != record.target.shape:
        raise ValueError(f"generated shape {generated.shape} != target shape {record.target.shape}")
    tag = record.task_tag
    if tag == "t2i":
        return _score_t2i(record, generated, codec)
    if tag == "edit":
        return _score_edit_latents(record.input_images[0], record.target, generated)
    if tag == "subject":
        return _score_subject(record, generated, codec)
    if tag == "visual_cond":
        return _score_visual_cond(record, generated, codec)
    if tag == "fewshot":
        stripped = ds.strip_fewshot(record)
        return _score_edit_latents(stripped.input_images[0], stripped.target, generated)
    raise ValueError(f"unknown task tag {tag!r}")


# -- shared pixel scoring -------------------------------------------------------


def _cell_color_scores(img: np.ndarray, color_idx: int, background) -> np.ndarray:
    """Per 3x3 cell: fraction of pixels that are object-ish and classify
    to the given palette color."""
    cls = classify_palette(img)
    obj = objectish(img, background)
    hit = obj & (cls == color_idx)
    canvas = img.shape[0]
    scores = np.zeros(9)
    for row in range(3):
        for col in range(3):
            y0, y1, x0, x1 = cell_bounds(canvas, row, col)
            scores[row * 3 + col] = hit[y0:y1, x0:x1].mean()
    return scores


def _score_expected_objects(img: np.ndarray, expected: list[tuple[str, ObjectSpec]],
                            background) -> dict[str, float]:
    cls = classify_palette(img)
    color_accs = []
    pos_accs = []
    for color_name, obj in expected:
        cidx = PALETTE_NAMES.index(color_name)
        support = object_support(img.shape[0], obj)
        color_accs.append(float((cls[support] == cidx).mean()))
        best = int(np.argmax(_cell_color_scores(img, cidx, background)))
        pos_accs.append(1.0 if (best // 3, best % 3) == obj.cell else 0.0)
    count_acc = 1.0 if len(occupied_cells(img, background)) == len(expected) else 0.0
    return {
        "color_acc": float(np.mean(color_accs)),
        "position_acc": float(np.mean(pos_accs)),
        "count_acc": count_acc,
    }


# -- per-family scorers ---------------------------------------------------------


def _score_t2i(record: TaskRecord, generated: np.ndarray, codec: LatentCodec) -> dict[str, float]:
    m = ds.T2I_RE.match(record.instruction)
    if not m:
        raise ValueError(f"cannot invert t2i caption: {record.instruction!r}")
    color, shape, position = m.group(1), m.group(2), m.group(3)
    img = codec.decode_clamped(generated)
    obj = ObjectSpec(shape, PALETTE[color], POSITIONS[position], ds.default_object_size(img.shape[0]))
    return _score_expected_objects(img, [(color, obj)], BLACK)


def _score_edit_latents(input_lat: np.ndarray, target_lat: np.ndarray,
                        generated: np.ndarray) -> dict[str, float]:
    diff = np.abs(input_lat.astype(np.float64) - target_lat.astype(np.float64))
    changed = diff > CHANGED_DETECT_TOL
    unchanged = ~changed
    gen = generated.astype(np.float64)
    if unchanged.any():
        preservation = float((np.abs(gen - input_lat)[unchanged] <= UNCHANGED_TOL).mean())
    else:
        preservation = 1.0
    if changed.any():
        moved = np.abs(gen - target_lat)[changed] < MOVE_MARGIN * diff[changed]
        change_rate = float(moved.mean())
    else:
        change_rate = 1.0
    return {"unchanged_preservation": preservation, "changed_change_rate": change_rate}


def _score_subject(record: TaskRecord, generated: np.ndarray, codec: LatentCodec) -> dict[str, float]:
    m = ds.SUBJECT_RE.match(record.instruction)
    if not m:
        raise ValueError(f"cannot invert subject instruction: {record.instruction!r}")
    shape, bg_name = m.group(1), m.group(2)
    reference = codec.decode_clamped(record.input_images[0])
    canvas = reference.shape[0]
    found = None
    for cell in occupied_cells(reference, BLACK):
        y0, y1, x0, x1 = cell_bounds(canvas, *cell)
        support = objectish(reference[y0:y1, x0:x1], BLACK)
        if classify_shape(support) == shape:
            found = dominant_color_name(reference[y0:y1, x0:x1][support])
            break
    if found is None:
        raise ValueError(f"reference image has no {shape!r} object")
    img = codec.decode_clamped(generated)
    obj = ObjectSpec(shape, PALETTE[found], POSITIONS["center"], ds.default_object_size(canvas))
    return _score_expected_objects(img, [(found, obj)], PALETTE[bg_name])


def _score_visual_cond(record: TaskRecord, generated: np.ndarray, codec: LatentCodec) -> dict[str, float]:
    m = ds.VISUAL_RE.match(record.instruction)
    if not m:
        raise ValueError(f"cannot invert visual-condition instruction: {record.instruction!r}")
    color = m.group(1)
    cidx = PALETTE_NAMES.index(color)
    edges = objectish(codec.decode_clamped(record.input_images[0]), BLACK)
    support = binary_fill_holes(edges)
    canvas = support.shape[0]
    ys, xs = np.nonzero(support)
    cy, cx = ys.mean(), xs.mean()
    expected_cell = None
    for row in range(3):
        for col in range(3):
            y0, y1, x0, x1 = cell_bounds(canvas, row, col)
            if y0 <= cy < y1 and x0 <= cx < x1:
                expected_cell = (row, col)
    img = codec.decode_clamped(generated)
    cls = classify_palette(img)
    color_acc = float((cls[support] == cidx).mean())
    best = int(np.argmax(_cell_color_scores(img, cidx, BLACK)))
    position_acc = 1.0 if (best // 3, best % 3) == expected_cell else 0.0
    count_acc = 1.0 if len(occupied_cells(img, BLACK)) == 1 else 0.0
    return {"color_acc": color_acc, "position_acc": position_acc, "count_acc": count_acc}
