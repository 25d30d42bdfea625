"""Miniature "anything to image" dataset: seeded generators for the five
task families, the line-delimited file format, and helpers shared with
the scoring oracle.

Captions are templated so they can be inverted; edit records are
constructed as *small* blend edits (small object, color shifted a
fraction toward the named color) so the region-weighted loss assigns
changed cells weights above 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blob import load_tensor, save_tensor
from .codec import DEFAULT_CODEC_SEED, LatentCodec
from .scenes import (PALETTE, PALETTE_NAMES, POSITION_NAMES, POSITIONS, SHAPES,
                     ObjectSpec, SceneSpec, extract_edges, object_support,
                     render_scene)
from .sequence import TASK_TAGS, TaskRecord, validate_record

DEFAULT_TASK_MIX = {"t2i": 0.40, "edit": 0.25, "subject": 0.15, "visual_cond": 0.15, "fewshot": 0.05}

EDIT_OBJECT_SIZE = 3
EDIT_BLEND = 0.15

T2I_RE = re.compile(r"^a (\w+) (\w+) at ([a-z ]+)$")
EDIT_RE = re.compile(r"^shift the (\w+) in \|image_1\| toward (\w+)$")
SUBJECT_RE = re.compile(r"^put the (\w+) from \|image_1\| on a (\w+) background$")
VISUAL_RE = re.compile(r"^follow the edges in \|image_1\|, fill with (\w+)$")
FEWSHOT_PREFIX = "for example |image_1| becomes |image_2|. "


def default_object_size(canvas: int) -> int:
    return 5 if canvas <= 20 else 9


@dataclass
class DatasetManifest:
    record_count: int
    seed: int = 0
    codec_seed: int = DEFAULT_CODEC_SEED
    latent_size: int = 8
    task_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TASK_MIX))

    def __post_init__(self):
        if abs(sum(self.task_mix.values()) - 1.0) > 1e-9:
            raise ValueError(f"task mix proportions must sum to 1, got {sum(self.task_mix.values())}")
        unknown = set(self.task_mix) - set(TASK_TAGS)
        if unknown:
            raise ValueError(f"unknown task tags in mix: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "record_count": self.record_count,
            "seed": self.seed,
            "codec_seed": self.codec_seed,
            "latent_size": self.latent_size,
            "task_mix": self.task_mix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


# -- task generators -----------------------------------------------------------


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def gen_t2i(rng: np.random.Generator, latent_size: int = 8,
            codec: LatentCodec | None = None) -> TaskRecord:
    """Single object, invertible caption, rendered target, no input images."""
    codec = codec or LatentCodec()
    canvas = 2 * latent_size
    color = _pick(rng, PALETTE_NAMES)
    shape = _pick(rng, SHAPES)
    position = _pick(rng, POSITION_NAMES)
    obj = ObjectSpec(shape, PALETTE[color], POSITIONS[position], default_object_size(canvas))
    target = codec.encode(render_scene(SceneSpec(canvas, [obj])))
    return TaskRecord(f"a {color} {shape} at {position}", [], target, "t2i")


def _edit_pair(rng: np.random.Generator, canvas: int,
               shape: str | None = None, toward: str | None = None):
    """(input scene, edited scene, shape, named color): one small object whose
    color moves a fixed fraction toward the named palette color."""
    shape = shape if shape is not None else _pick(rng, SHAPES)
    base = _pick(rng, [n for n in PALETTE_NAMES if n != toward])
    toward = toward if toward is not None else _pick(rng, [n for n in PALETTE_NAMES if n != base])
    position = _pick(rng, POSITION_NAMES)
    base_rgb = np.array(PALETTE[base], dtype=np.float32)
    new_rgb = base_rgb + EDIT_BLEND * (np.array(PALETTE[toward], dtype=np.float32) - base_rgb)
    obj_in = ObjectSpec(shape, tuple(base_rgb.tolist()), POSITIONS[position], EDIT_OBJECT_SIZE)
    obj_out = ObjectSpec(shape, tuple(new_rgb.tolist()), POSITIONS[position], EDIT_OBJECT_SIZE)
    return SceneSpec(canvas, [obj_in]), SceneSpec(canvas, [obj_out]), shape, toward


def gen_edit(rng: np.random.Generator, latent_size: int = 8,
             codec: LatentCodec | None = None) -> TaskRecord:
    """input scene + 'shift ... toward {color}'; target differs only inside
    the object's region."""
    codec = codec or LatentCodec()
    canvas = 2 * latent_size
    scene_in, scene_out, shape, toward = _edit_pair(rng, canvas)
    return TaskRecord(
        f"shift the {shape} in |image_1| toward {toward}",
        [codec.encode(render_scene(scene_in))],
        codec.encode(render_scene(scene_out)),
        "edit",
    )


def gen_subject(rng: np.random.Generator, latent_size: int = 8,
                codec: LatentCodec | None = None) -> TaskRecord:
    """Reference image with 1-3 distinct-shape objects; target re-renders the
    named one, same color and size, centered on a named background."""
    codec = codec or LatentCodec()
    canvas = 2 * latent_size
    size = default_object_size(canvas)
    k = int(rng.integers(1, 4))
    shapes = list(rng.permutation(SHAPES))[:k]
    colors = list(rng.permutation(PALETTE_NAMES))[:k]
    cells = [POSITIONS[n] for n in rng.permutation(POSITION_NAMES)[:k]]
    objects = [ObjectSpec(s, PALETTE[c], cell, size) for s, c, cell in zip(shapes, colors, cells)]
    pick = int(rng.integers(k))
    bg = _pick(rng, [n for n in PALETTE_NAMES if n not in colors])
    reference = SceneSpec(canvas, objects)
    target_obj = ObjectSpec(shapes[pick], PALETTE[colors[pick]], POSITIONS["center"], size)
    target = SceneSpec(canvas, [target_obj], background=PALETTE[bg])
    return TaskRecord(
        f"put the {shapes[pick]} from |image_1| on a {bg} background",
        [codec.encode(render_scene(reference))],
        codec.encode(render_scene(target)),
        "subject",
    )


def gen_visual_cond(rng: np.random.Generator, latent_size: int = 8,
                    codec: LatentCodec | None = None) -> TaskRecord:
    """Edge map of a scene as the condition; target fills it with the named color."""
    codec = codec or LatentCodec()
    canvas = 2 * latent_size
    color = _pick(rng, PALETTE_NAMES)
    shape = _pick(rng, SHAPES)
    position = _pick(rng, POSITION_NAMES)
    obj = ObjectSpec(shape, PALETTE[color], POSITIONS[position], default_object_size(canvas))
    edges = extract_edges(object_support(canvas, obj))
    edge_img = np.zeros((canvas, canvas, 3), dtype=np.float32)
    edge_img[edges] = 1.0
    target = codec.encode(render_scene(SceneSpec(canvas, [obj])))
    return TaskRecord(
        f"follow the edges in |image_1|, fill with {color}",
        [codec.encode(edge_img)],
        target,
        "visual_cond",
    )


def gen_fewshot(rng: np.random.Generator, latent_size: int = 8,
                codec: LatentCodec | None = None) -> TaskRecord:
    """One solved edit example (same shape and named color) prepended to a
    fresh edit task; three input images total."""
    codec = codec or LatentCodec()
    canvas = 2 * latent_size
    ex_in, ex_out, shape, toward = _edit_pair(rng, canvas)
    base_in, base_out, _, _ = _edit_pair(rng, canvas, shape=shape, toward=toward)
    return TaskRecord(
        FEWSHOT_PREFIX + f"shift the {shape} in |image_3| toward {toward}",
        [codec.encode(render_scene(ex_in)), codec.encode(render_scene(ex_out)),
         codec.encode(render_scene(base_in))],
        codec.encode(render_scene(base_out)),
        "fewshot",
    )


GENERATORS = {
    "t2i": gen_t2i,
    "edit": gen_edit,
    "subject": gen_subject,
    "visual_cond": gen_visual_cond,
    "fewshot": gen_fewshot,
}


def strip_fewshot(record: TaskRecord) -> TaskRecord:
    """Drop the worked example, recovering the base edit record."""
    if record.task_tag != "fewshot":
        raise ValueError(f"not a fewshot record: {record.task_tag!r}")
    if not record.instruction.startswith(FEWSHOT_PREFIX):
        raise ValueError(f"unrecognized fewshot instruction: {record.instruction!r}")
    base = record.instruction[len(FEWSHOT_PREFIX):].replace("|image_3|", "|image_1|")
    stripped = TaskRecord(base, [record.input_images[2]], record.target, "edit")
    validate_record(stripped)
    return stripped


def generate_records(manifest: DatasetManifest, codec: LatentCodec | None = None) -> list[TaskRecord]:
    """Deterministic records: the manifest seed fixes both the task-family
    draw and every record's content stream."""
    codec = codec or LatentCodec(manifest.codec_seed)
    master = np.random.default_rng(manifest.seed)
    names = sorted(manifest.task_mix)
    probs = np.array([manifest.task_mix[n] for n in names], dtype=np.float64)
    tags = master.choice(names, size=manifest.record_count, p=probs)
    seeds = master.integers(0, 2**63 - 1, size=manifest.record_count)
    records = []
    for tag, seed in zip(tags, seeds):
        rec = GENERATORS[str(tag)](np.random.default_rng(int(seed)), manifest.latent_size, codec)
        validate_record(rec)
        records.append(rec)
    return records


# -- files ----------------------------------------------------------------------


def write_dataset(manifest: DatasetManifest, path: str | Path) -> list[TaskRecord]:
    """Write manifest.json, records.jsonl and one blob per image under `path`."""
    path = Path(path)
    (path / "blobs").mkdir(parents=True, exist_ok=True)
    records = generate_records(manifest)
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    with open(path / "records.jsonl", "w") as f:
        for i, rec in enumerate(records):
            inputs = []
            for j, img in enumerate(rec.input_images):
                rel = f"blobs/r{i:05d}_in{j}.bin"
                save_tensor(path / rel, img)
                inputs.append(rel)
            target_rel = f"blobs/r{i:05d}_tgt.bin"
            save_tensor(path / target_rel, rec.target)
            line = {"instruction": rec.instruction, "task_tag": rec.task_tag,
                    "inputs": inputs, "target": target_rel}
            f.write(json.dumps(line, sort_keys=True) + "\n")
    return records


def read_dataset(path: str | Path) -> tuple[DatasetManifest, list[TaskRecord]]:
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    records = []
    with open(path / "records.jsonl") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = TaskRecord(
                    instruction=obj["instruction"],
                    input_images=[load_tensor(path / rel) for rel in obj["inputs"]],
                    target=load_tensor(path / obj["target"]),
                    task_tag=obj["task_tag"],
                )
                validate_record(rec)
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path / 'records.jsonl'} line {lineno}: {exc}") from exc
            records.append(rec)
    return manifest, records


def family_counts(records: list[TaskRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for rec in records:
        counts[rec.task_tag] = counts.get(rec.task_tag, 0) + 1
    return counts
