"""Task generators, dataset files, and the scoring oracle."""

import json

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from any2i.codec import LatentCodec
from any2i.dataset import (DEFAULT_TASK_MIX, EDIT_BLEND, DatasetManifest,
                           GENERATORS, family_counts, gen_edit, gen_fewshot,
                           gen_subject, gen_t2i, gen_visual_cond,
                           generate_records, read_dataset, strip_fewshot,
                           write_dataset)
from any2i.flow import edit_weights
from any2i.oracle import oracle_score
from any2i.scenes import (PALETTE_NAMES, SHAPES, classify_shape, extract_edges,
                          object_support, ObjectSpec, POSITIONS, shape_mask)
from any2i.sequence import PLACEHOLDER_RE

CODEC = LatentCodec()


def test_every_family_scores_its_own_target_perfectly():
    for seed in range(25):
        for name, gen in GENERATORS.items():
            for latent in (8, 16):
                rec = gen(np.random.default_rng(seed), latent, CODEC)
                scores = oracle_score(rec, rec.target, CODEC)
                assert scores, name
                for metric, value in scores.items():
                    assert value == pytest.approx(1.0), (name, latent, seed, metric)


def test_generators_deterministic():
    for name, gen in GENERATORS.items():
        a = gen(np.random.default_rng(5), 8, CODEC)
        b = gen(np.random.default_rng(5), 8, CODEC)
        assert a.instruction == b.instruction
        np.testing.assert_array_equal(a.target, b.target)
        for x, y in zip(a.input_images, b.input_images):
            np.testing.assert_array_equal(x, y)


def test_t2i_has_no_placeholders():
    rec = gen_t2i(np.random.default_rng(0), 8, CODEC)
    assert not PLACEHOLDER_RE.findall(rec.instruction)
    assert rec.input_images == []


def test_edit_record_structure():
    for seed in range(30):
        rec = gen_edit(np.random.default_rng(seed), 8, CODEC)
        assert len(PLACEHOLDER_RE.findall(rec.instruction)) == 1
        diff = np.abs(rec.target - rec.input_images[0])
        changed = diff > 1e-6
        assert changed.any()
        assert changed.mean() < 0.30                  # small changed region
        assert np.abs(diff[~changed]).max() == 0.0    # untouched region is exact
        w = edit_weights(rec.target, rec.input_images[0])
        assert w[changed].min() > 1.0                 # weights amplify the edit


def test_edit_copy_shortcut_scores_zero_change():
    rec = gen_edit(np.random.default_rng(1), 8, CODEC)
    scores = oracle_score(rec, rec.input_images[0], CODEC)
    assert scores["unchanged_preservation"] == pytest.approx(1.0)
    assert scores["changed_change_rate"] == 0.0


def test_subject_targets_carry_exactly_the_named_object():
    from any2i.scenes import occupied_cells, BLACK

    multi_seen = False
    for seed in range(60):
        rec = gen_subject(np.random.default_rng(seed), 8, CODEC)
        assert len(PLACEHOLDER_RE.findall(rec.instruction)) == 1
        target_img = CODEC.decode_clamped(rec.target)
        bg = target_img[0, 0]  # corner is always background
        cells = occupied_cells(target_img, bg)
        assert cells == [(1, 1)]  # single object, centered; distractors gone
        ref_cells = occupied_cells(CODEC.decode_clamped(rec.input_images[0]), BLACK)
        if len(ref_cells) > 1:
            multi_seen = True
            # copying the multi-object reference cannot pass the count check
            assert oracle_score(rec, rec.input_images[0], CODEC)["count_acc"] == 0.0
    assert multi_seen


def test_visual_cond_edges_match_independent_extractor():
    # generator edge rule vs scipy erosion: boundary = mask & ~erode(mask)
    for shape in SHAPES:
        for size in (5, 9):
            mask = np.zeros((16, 16), dtype=bool)
            mask[4:4 + size, 6:6 + size] = shape_mask(shape, size)
            ours = extract_edges(mask)
            scipy_edge = mask & ~binary_erosion(mask)
            np.testing.assert_array_equal(ours, scipy_edge)


def test_visual_cond_input_is_boundary_of_target_object():
    rec = gen_visual_cond(np.random.default_rng(3), 8, CODEC)
    edge_img = CODEC.decode_clamped(rec.input_images[0])
    target_img = CODEC.decode_clamped(rec.target)
    edge_mask = edge_img.mean(axis=-1) > 0.5
    support = (np.abs(target_img).max(axis=-1) > 0.25)
    np.testing.assert_array_equal(edge_mask, support & ~binary_erosion(support))


def test_shape_classifier_on_all_rendered_sizes():
    for shape in SHAPES:
        for size in (5, 7, 9):
            assert classify_shape(shape_mask(shape, size)) == shape


def test_fewshot_structure_and_strip():
    rec = gen_fewshot(np.random.default_rng(4), 8, CODEC)
    assert rec.task_tag == "fewshot"
    assert len(rec.input_images) == 3
    assert sorted(int(i) for i in PLACEHOLDER_RE.findall(rec.instruction)) == [1, 2, 3]
    base = strip_fewshot(rec)
    assert base.task_tag == "edit"
    assert len(base.input_images) == 1
    np.testing.assert_array_equal(base.target, rec.target)
    assert oracle_score(base, base.target, CODEC)["changed_change_rate"] == 1.0
    # the worked example is itself a consistent edit
    from any2i.sequence import TaskRecord
    example = TaskRecord(base.instruction, [rec.input_images[0]], rec.input_images[1], "edit")
    ex_scores = oracle_score(example, example.target, CODEC)
    assert ex_scores["unchanged_preservation"] == pytest.approx(1.0)
    assert ex_scores["changed_change_rate"] == pytest.approx(1.0)


def test_noise_color_accuracy_near_chance():
    rng = np.random.default_rng(5)
    accs = []
    for i in range(1500):
        rec = gen_t2i(np.random.default_rng(20_000 + i), 8, CODEC)
        noise = rng.standard_normal(rec.target.shape).astype(np.float32)
        accs.append(oracle_score(rec, noise, CODEC)["color_acc"])
    assert abs(float(np.mean(accs)) - 1 / 8) < 0.025


def test_oracle_rejects_unknown_tag():
    rec = gen_t2i(np.random.default_rng(0), 8, CODEC)
    rec.task_tag = "weird"
    with pytest.raises(ValueError, match="task tag"):
        oracle_score(rec, rec.target, CODEC)


# -- manifests and files -----------------------------------------------------------


def test_manifest_validates_proportions():
    with pytest.raises(ValueError, match="sum to 1"):
        DatasetManifest(record_count=10, task_mix={"t2i": 0.5})
    with pytest.raises(ValueError, match="unknown"):
        DatasetManifest(record_count=10, task_mix={"t2i": 0.5, "dance": 0.5})


def test_task_mix_proportions_within_two_percent():
    manifest = DatasetManifest(record_count=10_000, seed=1, latent_size=8)
    master = np.random.default_rng(manifest.seed)
    names = sorted(manifest.task_mix)
    probs = np.array([manifest.task_mix[n] for n in names])
    tags = master.choice(names, size=manifest.record_count, p=probs)
    for name, p in manifest.task_mix.items():
        assert abs((tags == name).mean() - p) < 0.02


def test_generated_mix_matches_manifest():
    manifest = DatasetManifest(record_count=400, seed=2, latent_size=8)
    counts = family_counts(generate_records(manifest))
    for name, p in manifest.task_mix.items():
        assert abs(counts.get(name, 0) / 400 - p) < 0.08


def test_dataset_roundtrip_100_records(tmp_path):
    manifest = DatasetManifest(record_count=100, seed=3, latent_size=8)
    written = write_dataset(manifest, tmp_path / "ds")
    manifest2, read = read_dataset(tmp_path / "ds")
    assert manifest2.to_dict() == manifest.to_dict()
    assert len(read) == 100
    for a, b in zip(written, read):
        assert a.instruction == b.instruction
        assert a.task_tag == b.task_tag
        np.testing.assert_array_equal(a.target, b.target)
        assert len(a.input_images) == len(b.input_images)
        for x, y in zip(a.input_images, b.input_images):
            np.testing.assert_array_equal(x, y)


def test_empty_dataset(tmp_path):
    manifest = DatasetManifest(record_count=0, seed=0)
    write_dataset(manifest, tmp_path / "ds")
    assert (tmp_path / "ds" / "records.jsonl").read_text() == ""
    _, records = read_dataset(tmp_path / "ds")
    assert records == []


def test_rerun_is_byte_identical(tmp_path):
    manifest = DatasetManifest(record_count=20, seed=4)
    write_dataset(manifest, tmp_path / "a")
    write_dataset(manifest, tmp_path / "b")
    for rel in ["manifest.json", "records.jsonl"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    blobs_a = sorted((tmp_path / "a" / "blobs").iterdir())
    blobs_b = sorted((tmp_path / "b" / "blobs").iterdir())
    assert [p.name for p in blobs_a] == [p.name for p in blobs_b]
    for pa, pb in zip(blobs_a, blobs_b):
        assert pa.read_bytes() == pb.read_bytes()


def test_corrupted_line_reports_line_number(tmp_path):
    manifest = DatasetManifest(record_count=3, seed=5)
    write_dataset(manifest, tmp_path / "ds")
    path = tmp_path / "ds" / "records.jsonl"
    lines = path.read_text().splitlines()
    lines[1] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 2"):
        read_dataset(tmp_path / "ds")


def test_placeholder_corruption_rejected(tmp_path):
    manifest = DatasetManifest(record_count=2, seed=6, task_mix={"edit": 1.0})
    write_dataset(manifest, tmp_path / "ds")
    path = tmp_path / "ds" / "records.jsonl"
    lines = path.read_text().splitlines()
    obj = json.loads(lines[0])
    obj["instruction"] = obj["instruction"].replace("|image_1|", "|image_2|")
    lines[0] = json.dumps(obj, sort_keys=True)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 1"):
        read_dataset(tmp_path / "ds")


def test_missing_blob_reports_path(tmp_path):
    manifest = DatasetManifest(record_count=2, seed=7)
    write_dataset(manifest, tmp_path / "ds")
    victim = next((tmp_path / "ds" / "blobs").iterdir())
    victim.unlink()
    with pytest.raises(FileNotFoundError, match=victim.name):
        read_dataset(tmp_path / "ds")
