import json

import numpy as np
import pytest

import oracles
from logoret.descriptor import AffineHead, write_fmap
from logoret.errors import EmptyCrop, MissingFeatureMap
from logoret.evaluation import BBox, recall_at_k
from logoret.index import Prototype, PrototypeIndex
from logoret.pipeline import (
    FeaturizerBackend,
    PipelineConfig,
    Proposal,
    cell_statistics,
    classify_proposal,
    crop_resize,
    embed_image,
    load_proposals,
    run_pipeline,
    toy_featurize,
    toy_projection,
    write_detections,
)
from logoret.synth import load_rgba, save_rgba

CFG = PipelineConfig(crop_size=32, toy_channels=64, threshold=0.45)
HEAD = AffineHead.identity(64)


def noise(rng, h, w):
    img = rng.integers(0, 256, (h, w, 4), dtype=np.uint8)
    img[..., 3] = 255
    return img


class TestCrop:
    def test_full_image_identity(self, rng):
        img = noise(rng, 224, 224)
        np.testing.assert_array_equal(crop_resize(img, BBox(0, 0, 224, 224), 224), img)

    def test_left_half_matches_reference(self, rng):
        img = noise(rng, 24, 48)  # small stand-in for 448x224: same 2:1 geometry
        out = crop_resize(img, BBox(0, 0, 24, 24), 20)
        ref = np.array(oracles.bilinear_resize(img[:, :24].astype(float).tolist(), 20, 20))
        # output is rounded to uint8; values at exact .5 may round either way
        assert np.max(np.abs(out - ref)) <= 0.5 + 1e-9

    @pytest.mark.slow
    def test_left_half_full_size(self, rng):
        img = noise(rng, 224, 448)
        out = crop_resize(img, BBox(0, 0, 224, 224), 224)
        np.testing.assert_array_equal(out, img[:, :224])

    def test_clipped_and_fractional(self, rng):
        img = noise(rng, 10, 10)
        out = crop_resize(img, BBox(-5, 4.2, 3.5, 30), 6)
        ref = crop_resize(img, BBox(0, 4, 4, 10), 6)
        np.testing.assert_array_equal(out, ref)

    def test_outside(self, rng):
        with pytest.raises(EmptyCrop):
            crop_resize(noise(rng, 10, 10), BBox(20, 20, 30, 30), 8)


class TestToyFeaturizer:
    def test_uniform_gray(self):
        img = np.full((32, 32, 4), 128, np.uint8)
        img[..., 3] = 255
        stats = cell_statistics(img, 4)
        assert np.all(stats[..., 3:] == 0)
        np.testing.assert_allclose(stats[..., :3], 128 / 255)
        fm = toy_featurize(img, 4, 64)
        np.testing.assert_allclose(fm, np.broadcast_to(toy_projection(64)[:, :3].sum(axis=1) * 128 / 255, (4, 4, 64)))

    def test_deterministic(self, rng):
        img = noise(rng, 32, 32)
        assert toy_featurize(img).tobytes() == toy_featurize(img.copy()).tobytes()

    def test_channel_swap_permutes_statistics(self, rng):
        img = noise(rng, 32, 32)
        swapped = img.copy()
        swapped[..., [0, 2]] = img[..., [2, 0]]
        perm = [2, 1, 0, 5, 4, 3, 8, 7, 6, 11, 10, 9]
        a, b = cell_statistics(img, 4), cell_statistics(swapped, 4)
        np.testing.assert_allclose(b, a[..., perm], atol=1e-15)
        np.testing.assert_allclose(toy_featurize(swapped, 4, 64), a[..., perm] @ toy_projection(64).T, atol=1e-12)

    def test_cell_statistics_by_hand(self):
        img = np.zeros((2, 2, 4), np.uint8)
        img[..., 3] = 255
        img[0, 1, 0] = 255  # one red pixel
        s = cell_statistics(img, 1)[0, 0]
        assert s[0] == pytest.approx(0.25) and s[3] == pytest.approx(0.1875)
        assert s[6] == pytest.approx(0.5) and s[9] == pytest.approx(0.5)

    def test_transparent_pixels_flatten_to_gray(self):
        img = np.zeros((4, 4, 4), np.uint8)
        np.testing.assert_allclose(cell_statistics(img, 1)[0, 0, :3], 0.5)

    def test_bad_args(self, rng):
        with pytest.raises(ValueError):
            toy_featurize(noise(rng, 8, 8), 2, 11)


def stamped_world(tmp_path, rng, n_classes=3, images_per_class=2):
    """Logos pasted pixel-aligned into noise images; returns (logos, index, proposals)."""
    logos = [noise(rng, 20, 28) for _ in range(n_classes)]
    index = PrototypeIndex()
    for c, logo in enumerate(logos):
        index.add(Prototype(f"c{c}", "0", embed_image(logo, HEAD, CFG)))
    proposals = []
    (tmp_path / "images").mkdir()
    for c, logo in enumerate(logos):
        for k in range(images_per_class):
            img = noise(rng, 60, 80)
            x, y = int(rng.integers(0, 50)), int(rng.integers(0, 38))
            img[y:y + 20, x:x + 28] = logo
            name = f"c{c}_{k}.png"
            save_rgba(tmp_path / "images" / name, img)
            proposals.append(Proposal(name, BBox(x, y, x + 28, y + 20), 0.9))
            # a background-only distractor with lower objectness
            proposals.append(Proposal(name, BBox(0, 0, 10, 10), 0.2 + 0.1 * k))
    return logos, index, proposals


class TestClassify:
    def test_exact_prototype_crop(self, tmp_path, rng):
        logos, index, proposals = stamped_world(tmp_path, rng, 1, 1)
        img = load_rgba(tmp_path / "images" / proposals[0].image_id)
        det = classify_proposal(img, proposals[0], FeaturizerBackend(), HEAD, index, CFG)
        assert det.class_id == "c0" and det.score == pytest.approx(1.0, abs=1e-12)
        assert det.bbox == proposals[0].bbox and dict(det.metadata) == {"objectness": 0.9}

    def test_threshold_above_everything(self, tmp_path, rng):
        logos, index, proposals = stamped_world(tmp_path, rng, 2, 1)
        cfg = PipelineConfig(crop_size=32, toy_channels=64, threshold=1.0)
        dets, summary = run_pipeline(tmp_path / "images", [proposals[1]], FeaturizerBackend(), HEAD, index, cfg)
        assert dets == [] and summary["rejected_by_threshold"] == 1


class TestRun:
    def test_zero_proposals(self, tmp_path):
        dets, summary = run_pipeline(tmp_path, [], FeaturizerBackend(), HEAD, PrototypeIndex(), CFG)
        assert dets == [] and set(summary.values()) == {0}

    def test_three_classes_exact(self, tmp_path, rng):
        _, index, proposals = stamped_world(tmp_path, rng)
        exact = [p for p in proposals if p.objectness == 0.9]
        dets, summary = run_pipeline(tmp_path / "images", exact, FeaturizerBackend(), HEAD, index, CFG)
        assert [d.class_id for d in dets] == [p.image_id[:2] for p in sorted(exact, key=lambda p: p.image_id)]
        assert all(d.score == pytest.approx(1.0, abs=1e-12) for d in dets)
        assert summary["proposals"] == summary["classified"] == 6

    def test_scores_respect_threshold(self, tmp_path, rng):
        _, index, proposals = stamped_world(tmp_path, rng)
        cfg = PipelineConfig(crop_size=32, toy_channels=64, threshold=-1.0)
        dets, summary = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, cfg)
        assert len(dets) == len(proposals)
        assert all(-1.0 <= d.score <= 1.0 for d in dets)
        strict = [d for d in dets if d.score >= 0.45]
        again, _ = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, CFG)
        assert again == strict

    def test_top_n_subsets(self, tmp_path, rng):
        _, index, proposals = stamped_world(tmp_path, rng)
        extra = [Proposal(p.image_id, BBox(5, 5, 40, 40), 0.5) for p in proposals[::2]]
        allp = proposals + extra
        cfg = lambda n: PipelineConfig(crop_size=32, toy_channels=64, threshold=-1.0, top_n=n)
        runs = {n: set(run_pipeline(tmp_path / "images", allp, FeaturizerBackend(), HEAD, index, cfg(n))[0])
                for n in (1, 2, 3, None)}
        per_image = {}
        for d in runs[1]:
            per_image[d.image_id] = per_image.get(d.image_id, 0) + 1
        assert set(per_image.values()) == {1}
        assert runs[1] <= runs[2] <= runs[3] <= runs[None]
        assert len(runs[None]) == len(allp)

    def test_deterministic_output(self, tmp_path, rng):
        _, index, proposals = stamped_world(tmp_path, rng)
        a, _ = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, CFG)
        b, _ = run_pipeline(tmp_path / "images", proposals[::-1], FeaturizerBackend(), HEAD, index, CFG)
        write_detections(tmp_path / "a.jsonl", a)
        write_detections(tmp_path / "a2.jsonl", a)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "a2.jsonl").read_bytes()
        assert sorted(a, key=lambda d: (d.image_id, d.bbox)) == sorted(b, key=lambda d: (d.image_id, d.bbox))

    def test_remove_and_readd(self, tmp_path, rng):
        logos, index, proposals = stamped_world(tmp_path, rng)
        before, _ = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, CFG)
        assert any(d.class_id == "c1" for d in before)
        saved = [p for p in index.prototypes() if p.class_id == "c1"]
        index.remove("c1")
        during, _ = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, CFG)
        assert all(d.class_id != "c1" for d in during)
        index.add_many(saved)
        after, _ = run_pipeline(tmp_path / "images", proposals, FeaturizerBackend(), HEAD, index, CFG)
        assert after == before

    def test_adding_prototype_never_lowers_recall(self, rng):
        index = PrototypeIndex()
        protos = [Prototype(f"c{i}", "0", v) for i, v in enumerate(_units(rng, 6, 16))]
        index.add_many(protos)
        queries = _units(rng, 40, 16)
        truths = [f"c{i % 6}" for i in range(40)]

        def recall(k):
            ranked = [[r.class_id for r in index.ranked_classes(q)] for q in queries]
            return [recall_at_k([r], [t], k) for r, t in zip(ranked, truths)]

        base = {k: recall(k) for k in (1, 3)}
        for extra in _units(rng, 5, 16):
            index.add(Prototype("c2", f"x{len(index)}", extra))
            for k in base:
                now = recall(k)
                for q, t in enumerate(truths):
                    if t == "c2":
                        assert now[q] >= base[k][q]
                base[k] = now

    def test_load_proposals_defaults(self, tmp_path):
        (tmp_path / "p.jsonl").write_text(
            json.dumps({"image": "a.png", "bbox": [0, 0, 5, 5], "class": "x"}) + "\n"
            + json.dumps({"image": "a.png", "bbox": [1, 1, 5, 5], "objectness": 0.3}) + "\n"
        )
        ps = load_proposals(tmp_path / "p.jsonl")
        assert [p.objectness for p in ps] == [1.0, 0.3]


def _units(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestPrecomputed:
    def test_backend(self, tmp_path, rng):
        fms = [rng.standard_normal((3, 3, 8)).astype(np.float32).astype(float) for _ in range(2)]
        lines = []
        for i, fm in enumerate(fms):
            write_fmap(tmp_path / f"{i}.fmap", fm)
            lines.append(json.dumps({"image": f"im{i}.png", "bbox": [0, 0, 10, 10 + i], "fmap": f"{i}.fmap"}))
        (tmp_path / "map.jsonl").write_text("\n".join(lines) + "\n")
        backend = FeaturizerBackend.precomputed(tmp_path / "map.jsonl")
        cfg = PipelineConfig(threshold=0.0)
        head = AffineHead.identity(8)
        index = PrototypeIndex()
        for i, fm in enumerate(fms):
            index.add(Prototype(f"k{i}", "0", np.max(fm, axis=(0, 1)) / np.linalg.norm(np.max(fm, axis=(0, 1)))))
        props = [Proposal("im1.png", BBox(0, 0, 10, 11)), Proposal("im0.png", BBox(0, 0, 10, 10))]
        dets, _ = run_pipeline(tmp_path, props, backend, head, index, cfg)
        assert [(d.image_id, d.class_id) for d in dets] == [("im0.png", "k0"), ("im1.png", "k1")]
        with pytest.raises(MissingFeatureMap):
            run_pipeline(tmp_path, [Proposal("im0.png", BBox(0, 0, 9, 9))], backend, head, index, cfg)
