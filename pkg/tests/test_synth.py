import collections

import numpy as np
import pytest

from boostdet.geometry import iou
from boostdet.synth import (
    NoiseModel,
    SceneSpec,
    SPURIOUS_MAX_IOU,
    generate_dataset,
    image_to_input,
    inject_noise,
    read_pgm,
    reconstruct_clean,
    render_scene,
    write_pgm,
)


class TestGeneration:
    def test_deterministic_per_seed(self):
        spec = SceneSpec()
        img_a, ann_a, _ = generate_dataset(spec, 5, seed=9)
        img_b, ann_b, _ = generate_dataset(spec, 5, seed=9)
        assert ann_a == ann_b
        for k in img_a:
            np.testing.assert_array_equal(img_a[k], img_b[k])

    def test_different_seeds_differ(self):
        spec = SceneSpec()
        img_a, _, _ = generate_dataset(spec, 3, seed=1)
        img_b, _, _ = generate_dataset(spec, 3, seed=2)
        assert any(not np.array_equal(img_a[k], img_b[k]) for k in img_a)

    def test_zero_objects(self):
        spec = SceneSpec(objects_per_image=(0, 0))
        _, anns, nxt = generate_dataset(spec, 4, seed=0)
        assert all(v == [] for v in anns.values())
        assert nxt == 1

    def test_objects_inside_image_and_indices_unique(self):
        spec = SceneSpec()
        _, anns, nxt = generate_dataset(spec, 30, seed=3)
        ids = [g.object_index for objs in anns.values() for g in objs]
        assert len(ids) == len(set(ids)) == nxt - 1
        for objs in anns.values():
            for g in objs:
                x1, y1, x2, y2 = g.box.corners()
                assert 0 <= x1 < x2 <= spec.image_size
                assert 0 <= y1 < y2 <= spec.image_size

    def test_class_balance_near_uniform(self):
        spec = SceneSpec()
        _, anns, _ = generate_dataset(spec, 200, seed=0)
        counts = collections.Counter(g.cls for objs in anns.values() for g in objs)
        total = sum(counts.values())
        for c in (1, 2, 3):
            assert abs(counts[c] / total - 1 / 3) < 0.1 / 3 * 3  # within 10% of uniform share

    def test_shapes_render_brighter_than_background(self):
        img, objects = render_scene(SceneSpec(texture=0.02, blur_sigma=0.0), seed=5, index=0)
        for g in objects:
            cx, cy = int(g.box.cx), int(g.box.cy)
            patch = img[max(cy - 1, 0):cy + 2, max(cx - 1, 0):cx + 2]
            assert patch.mean() > img.mean()

    def test_image_range_uint8(self):
        img, _ = render_scene(SceneSpec(), seed=1, index=2)
        assert img.dtype == np.uint8
        x = image_to_input(img)
        assert x.shape == (64, 64, 1)
        assert 0.0 <= x.min() and x.max() <= 1.0


class TestNoise:
    def setup_method(self):
        self.spec = SceneSpec()
        _, self.clean, self.next_index = generate_dataset(self.spec, 60, seed=4)

    def test_zero_rates_noop(self):
        noisy, ledger = inject_noise(self.clean, NoiseModel(0, 0, 0, seed=1), self.spec)
        assert ledger == []
        assert noisy == self.clean

    def test_spurious_rate_one_adds_boxes(self):
        noisy, ledger = inject_noise(self.clean, NoiseModel(1.0, 0, 0, seed=2), self.spec)
        touched = {e["image_id"] for e in ledger if e["kind"] == "spurious"}
        assert len(touched) == len(self.clean)  # every image gained one
        extra = sum(len(noisy[k]) - len(self.clean[k]) for k in self.clean)
        assert extra == len(ledger)

    def test_spurious_boxes_avoid_true_objects(self):
        noisy, ledger = inject_noise(self.clean, NoiseModel(1.0, 0, 0, seed=3), self.spec)
        spurious_ids = {e["object_index"] for e in ledger}
        for image_id, objs in noisy.items():
            for s in (o for o in objs if o.object_index in spurious_ids):
                for t in self.clean[image_id]:
                    assert iou(s.box, t.box) < SPURIOUS_MAX_IOU

    def test_drop_rate_binomial_range(self):
        # 0.2 of ~1000 objects over several noise seeds: 200 +- 40 covers the
        # 99% binomial interval
        spec = SceneSpec(objects_per_image=(3, 3))
        _, clean, _ = generate_dataset(spec, 334, seed=6)
        n = sum(len(v) for v in clean.values())
        assert n >= 1000
        for noise_seed in range(5):
            _, ledger = inject_noise(clean, NoiseModel(0, 0.2, 0, seed=noise_seed), spec)
            dropped = sum(1 for e in ledger if e["kind"] == "drop")
            assert abs(dropped - 0.2 * n) <= 40 + 0.2 * (n - 1000)

    def test_flip_changes_class(self):
        noisy, ledger = inject_noise(self.clean, NoiseModel(0, 0, 1.0, seed=7), self.spec)
        flips = {e["object_index"]: e for e in ledger}
        assert flips
        by_index = {g.object_index: g for objs in noisy.values() for g in objs}
        for idx, e in flips.items():
            assert by_index[idx].cls == e["new_cls"] != e["original_cls"]

    def test_ledger_reconstructs_clean_exactly(self):
        noisy, ledger = inject_noise(
            self.clean, NoiseModel(0.4, 0.25, 0.2, seed=8), self.spec, first_spurious_index=self.next_index
        )
        assert ledger  # all three kinds present at these rates
        kinds = {e["kind"] for e in ledger}
        assert kinds == {"spurious", "drop", "flip"}
        rebuilt = reconstruct_clean(noisy, ledger)
        clean_sorted = {k: sorted(v, key=lambda o: o.object_index) for k, v in self.clean.items()}
        assert rebuilt == clean_sorted

    def test_deterministic(self):
        a = inject_noise(self.clean, NoiseModel(0.3, 0.2, 0.1, seed=9), self.spec)
        b = inject_noise(self.clean, NoiseModel(0.3, 0.2, 0.1, seed=9), self.spec)
        assert a == b

    def test_invalid_rates_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel(spurious_rate=1.5)


class TestPgm:
    def test_round_trip(self, tmp_path):
        img, _ = render_scene(SceneSpec(), seed=1, index=0)
        p = tmp_path / "x.pgm"
        write_pgm(p, img, comment="config_digest=abc123")
        back = read_pgm(p)
        np.testing.assert_array_equal(back, img)
        assert b"config_digest=abc123" in p.read_bytes()

    def test_rejects_non_pgm(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ValueError):
            read_pgm(p)
