import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iadn.dataio import (
    EXCLUDED,
    Annotation,
    GeneratorParams,
    MultispectralFrame,
    generate_synthetic_dataset,
    load_dataset,
    rasterize_seg_targets,
    save_dataset,
)
from iadn.errors import ConfigError, DataError, FormatVersionError


@pytest.fixture(scope="module")
def thousand():
    return generate_synthetic_dataset(n_frames=1000, seed=11, day_fraction=0.65, height=64, width=80)


def blank_frame(h=32, w=32, annotations=()):
    return MultispectralFrame(
        "x", np.zeros((h, w, 3), np.uint8), np.zeros((h, w, 1), np.uint8), "day", list(annotations)
    )


class TestTypes:
    @pytest.mark.parametrize("box", [(0, 0, 0, 5), (0, 0, 5, -1), (1, 2, 3)])
    def test_annotation_rejects(self, box):
        with pytest.raises(DataError):
            Annotation(box)

    def test_visibility_range(self):
        with pytest.raises(DataError):
            Annotation((0, 0, 1, 1), visibility=1.5)

    def test_unknown_illumination(self):
        with pytest.raises(DataError):
            MultispectralFrame("x", np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4, 1), np.uint8), "dusk")

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            MultispectralFrame("x", np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5, 1), np.uint8), "day")

    def test_normalized_views(self):
        f = blank_frame()
        f.visible_u8[0, 0] = 255
        assert f.visible.dtype == np.float32 and f.visible[0, 0, 0] == 1.0
        assert f.thermal.shape == (32, 32, 1)


class TestGenerator:
    def test_deterministic(self):
        a = generate_synthetic_dataset(n_frames=5, seed=2)
        b = generate_synthetic_dataset(n_frames=5, seed=2)
        assert a == b

    def test_seed_matters(self):
        a = generate_synthetic_dataset(n_frames=3, seed=0)
        b = generate_synthetic_dataset(n_frames=3, seed=1)
        assert a != b

    def test_byte_identical_directories(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(generate_synthetic_dataset(n_frames=4, seed=8), tmp_path / name)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 9
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_day_count(self, thousand):
        n_day = sum(f.is_day for f in thousand)
        assert 600 <= n_day <= 700
        again = generate_synthetic_dataset(n_frames=1000, seed=11, day_fraction=0.65, height=64, width=80)
        assert n_day == sum(f.is_day for f in again)

    def test_boxes_inside_image(self, thousand):
        for f in thousand:
            h, w = f.size
            for a in f.annotations:
                x, y, bw, bh = a.box
                assert x >= 0 and y >= 0 and x + bw <= w + 1e-9 and y + bh <= h + 1e-9

    def test_ignore_flags(self):
        data = generate_synthetic_dataset(n_frames=300, seed=5, ignore_rate=0.0)
        for f in data:
            for a in f.annotations:
                # clipped height equals drawn height unless the box left the frame vertically
                small = a.visibility == 1.0 and a.box[3] < 24.0
                if small or a.visibility < 0.5:
                    assert a.ignore
                if a.visibility >= 0.5 and a.box[3] / a.visibility >= 24.0 and a.visibility == 1.0:
                    assert not a.ignore

    def test_illumination_separable(self, thousand):
        lum = np.array([f.visible.mean() for f in thousand])
        day = np.array([f.is_day for f in thousand])
        # best single threshold on mean visible luminance
        best = max(np.mean((lum > t) == day) for t in np.unique(lum))
        assert best >= 0.99

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_frames=1), dict(height=100), dict(day_fraction=1.5), dict(pedestrians=(3, 1)), dict(ignore_rate=-0.1)],
    )
    def test_bad_params(self, kwargs):
        with pytest.raises(ConfigError):
            generate_synthetic_dataset(**kwargs)

    def test_params_object(self):
        p = GeneratorParams(n_frames=2, height=32, width=48)
        assert generate_synthetic_dataset(p, seed=0)[0].size == (32, 48)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        frames = generate_synthetic_dataset(n_frames=6, seed=4, ignore_rate=0.3)
        save_dataset(frames, tmp_path)
        back = load_dataset(tmp_path)
        assert back == frames
        for a, b in zip(frames, back):
            assert a.visible_u8.tobytes() == b.visible_u8.tobytes()
            assert a.annotations == b.annotations

    def test_index_header(self, tmp_path):
        save_dataset(generate_synthetic_dataset(n_frames=2, seed=0), tmp_path)
        header = json.loads((tmp_path / "index.jsonl").read_text().splitlines()[0])
        assert header == {"count": 2, "format": "iadn-dataset", "version": "v1"}

    def test_truncated_image_names_frame(self, tmp_path):
        frames = generate_synthetic_dataset(n_frames=3, seed=0)
        save_dataset(frames, tmp_path)
        path = tmp_path / "images" / f"{frames[1].id}_thr.pgm"
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(DataError, match=frames[1].id):
            load_dataset(tmp_path)

    def test_missing_image_names_path(self, tmp_path):
        frames = generate_synthetic_dataset(n_frames=2, seed=0)
        save_dataset(frames, tmp_path)
        (tmp_path / "images" / f"{frames[0].id}_vis.ppm").unlink()
        with pytest.raises(DataError, match="_vis.ppm"):
            load_dataset(tmp_path)

    def _rewrite_index(self, tmp_path, fn):
        index = tmp_path / "index.jsonl"
        lines = index.read_text().splitlines()
        index.write_text("\n".join(fn(lines)) + "\n")

    def test_unknown_illumination_token(self, tmp_path):
        save_dataset(generate_synthetic_dataset(n_frames=2, seed=0), tmp_path)

        def edit(lines):
            rec = json.loads(lines[1])
            rec["illumination"] = "twilight"
            return [lines[0], json.dumps(rec)] + lines[2:]

        self._rewrite_index(tmp_path, edit)
        with pytest.raises(DataError, match="twilight"):
            load_dataset(tmp_path)

    def test_unknown_version(self, tmp_path):
        save_dataset(generate_synthetic_dataset(n_frames=2, seed=0), tmp_path)
        self._rewrite_index(tmp_path, lambda lines: [lines[0].replace('"v1"', '"v9"')] + lines[1:])
        with pytest.raises(FormatVersionError):
            load_dataset(tmp_path)

    def test_malformed_record(self, tmp_path):
        save_dataset(generate_synthetic_dataset(n_frames=2, seed=0), tmp_path)
        self._rewrite_index(tmp_path, lambda lines: lines[:1] + ["{not json"] + lines[2:])
        with pytest.raises(DataError, match="index.jsonl:2"):
            load_dataset(tmp_path)

    def test_count_mismatch(self, tmp_path):
        save_dataset(generate_synthetic_dataset(n_frames=3, seed=0), tmp_path)
        self._rewrite_index(tmp_path, lambda lines: lines[:-1])
        with pytest.raises(DataError, match="found 2"):
            load_dataset(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")


class TestRasterize:
    def test_full_cover(self):
        t = rasterize_seg_targets(blank_frame(annotations=[Annotation((0, 0, 32, 32))]), (4, 4), 8)
        assert np.all(t.labels == 1)

    def test_empty(self):
        t = rasterize_seg_targets(blank_frame(), (4, 4), 8)
        assert np.all(t.labels == 0)

    def test_center_in_box(self):
        t = rasterize_seg_targets(blank_frame(annotations=[Annotation((8, 8, 16, 16))]), (4, 4), 8)
        expected = np.zeros((4, 4), np.int8)
        expected[1:3, 1:3] = 1
        np.testing.assert_array_equal(t.labels, expected)

    def test_ignore_only_is_excluded(self):
        anns = [Annotation((0, 0, 16, 16), ignore=True), Annotation((8, 8, 16, 16))]
        t = rasterize_seg_targets(blank_frame(annotations=anns), (4, 4), 8)
        assert t.labels[0, 0] == EXCLUDED and t.labels[1, 1] == 1 and t.labels[3, 3] == 0

    def test_bad_grid(self):
        with pytest.raises(DataError):
            rasterize_seg_targets(blank_frame(), (3, 4), 8)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-10, 40), st.floats(-10, 40), st.floats(0.5, 30), st.floats(0.5, 30), st.booleans()
            ),
            max_size=5,
        )
    )
    def test_matches_brute_force(self, boxes):
        anns = [Annotation((x, y, w, h), ignore=ig) for x, y, w, h, ig in boxes]
        t = rasterize_seg_targets(blank_frame(annotations=anns), (4, 4), 8)
        for i in range(4):
            for j in range(4):
                cx, cy = 8 * j + 4, 8 * i + 4
                hits = [a for a in anns if a.box[0] <= cx < a.box[0] + a.box[2] and a.box[1] <= cy < a.box[1] + a.box[3]]
                if any(not a.ignore for a in hits):
                    assert t.labels[i, j] == 1
                elif hits:
                    assert t.labels[i, j] == EXCLUDED
                else:
                    assert t.labels[i, j] == 0
