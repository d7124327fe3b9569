import json
import struct

import numpy as np
import pytest
from PIL import Image

from cal.checkpoint import (
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)
from cal.model import AttentionModel, forward
from cal.plotting import plot_ablation, plot_cmc, plot_training_curves
from cal.tensor import FormatError, Tensor
from cal.visualize import (
    ATTENTION_BOX_COLOR,
    GT_COLOR,
    RAMP,
    apply_ramp,
    draw_box,
    export_sample,
    heatmaps,
    overlay,
    read_ppm,
    write_ppm,
)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = AttentionModel.create(5, num_heads=3, depth=3, seed=2, attention_norm=True)
        save_checkpoint(m, tmp_path / "m.calm", extra={"epochs": 4})
        back, manifest = load_checkpoint(tmp_path / "m.calm")
        assert manifest["extra"] == {"epochs": 4}
        assert back.num_heads == 3 and back.num_classes == 5 and back.channels == m.channels and back.attention_norm
        for n in m.params:
            assert back.params[n].data.tobytes() == m.params[n].data.tobytes()
        img = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 16, 16)))
        assert forward(back, img).logits.data.tobytes() == forward(m, img).logits.data.tobytes()

    def test_deterministic_bytes(self):
        m = AttentionModel.create(3, num_heads=2, depth=2, seed=0)
        assert checkpoint_to_bytes(m) == checkpoint_to_bytes(m)

    def test_truncations(self):
        buf = checkpoint_to_bytes(AttentionModel.create(3, num_heads=2, depth=2, seed=0))
        for cut in (0, 3, 8, 20, len(buf) // 2, len(buf) - 1):
            with pytest.raises(FormatError):
                checkpoint_from_bytes(buf[:cut])

    def test_trailing(self):
        buf = checkpoint_to_bytes(AttentionModel.create(3, num_heads=2, depth=2, seed=0))
        with pytest.raises(FormatError, match="trailing"):
            checkpoint_from_bytes(buf + b"\0")

    def test_bad_magic_version(self):
        buf = checkpoint_to_bytes(AttentionModel.create(3, num_heads=2, depth=2, seed=0))
        with pytest.raises(FormatError, match="magic"):
            checkpoint_from_bytes(b"CALX" + buf[4:])
        with pytest.raises(FormatError, match="version"):
            checkpoint_from_bytes(buf[:4] + b"\x07" + buf[5:])

    def _rewrite_manifest(self, buf, edit):
        (n,) = struct.unpack_from("<Q", buf, 5)
        meta = json.loads(buf[13 : 13 + n])
        edit(meta)
        raw = json.dumps(meta, sort_keys=True).encode()
        return buf[:5] + struct.pack("<Q", len(raw)) + raw + buf[13 + n :]

    def test_architecture_mismatch(self):
        buf = checkpoint_to_bytes(AttentionModel.create(3, num_heads=2, depth=2, seed=0))
        bad = self._rewrite_manifest(buf, lambda m: m.update(num_heads=5))
        with pytest.raises(FormatError, match="architecture"):
            checkpoint_from_bytes(bad)
        bad = self._rewrite_manifest(buf, lambda m: m.update(depth=3))
        with pytest.raises(FormatError, match="depth"):
            checkpoint_from_bytes(bad)

    def test_corrupt_manifest(self):
        buf = checkpoint_to_bytes(AttentionModel.create(3, num_heads=2, depth=2, seed=0))
        bad = self._rewrite_manifest(buf, lambda m: m.pop("channels"))
        with pytest.raises(FormatError, match="manifest"):
            checkpoint_from_bytes(bad)


class TestPPM:
    def test_round_trip_against_reference_reader(self, tmp_path):
        rgb = np.random.default_rng(0).integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        write_ppm(tmp_path / "a.ppm", rgb)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "a.ppm").convert("RGB")), rgb)
        assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)

    def test_reads_reference_writer_with_comment(self, tmp_path):
        rgb = np.random.default_rng(1).integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
        (tmp_path / "b.ppm").write_bytes(b"P6\n# made elsewhere\n6 4\n255\n" + rgb.tobytes())
        assert np.array_equal(read_ppm(tmp_path / "b.ppm"), rgb)
        Image.fromarray(rgb).save(tmp_path / "c.ppm")
        assert np.array_equal(read_ppm(tmp_path / "c.ppm"), rgb)

    def test_rejects(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 3)))
        (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError, match="P6"):
            read_ppm(tmp_path / "p3.ppm")
        (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n\0\0")
        with pytest.raises(ValueError, match="raster"):
            read_ppm(tmp_path / "short.ppm")


class TestHeatmaps:
    def test_ramp_endpoints(self):
        assert apply_ramp(np.array([0.0, 1.0])).tolist() == [RAMP[0].tolist(), RAMP[-1].tolist()]
        assert apply_ramp(np.array(0.25)).tolist() == RAMP[1].tolist()

    def test_all_zero_is_zero_colour(self):
        h = heatmaps(np.zeros((3, 4, 4)), 32)
        assert h.shape == (3, 32, 32, 3)
        assert (h == RAMP[0].astype(np.uint8)).all()

    def test_one_hot_single_block(self):
        a = np.zeros((1, 4, 4))
        a[0, 2, 1] = 0.3
        h = heatmaps(a, 32)[0]
        hot = (h == RAMP[-1].astype(np.uint8)).all(axis=2)
        ys, xs = np.nonzero(hot)
        assert hot.sum() == 64
        assert (ys.min(), ys.max(), xs.min(), xs.max()) == (16, 23, 8, 15)
        assert (h[~hot] == RAMP[0].astype(np.uint8)).all()

    def test_overlay_boxes(self):
        img = np.full((3, 32, 32), 0.5)
        att = np.zeros((2, 4, 4))
        att[1, 0, 0] = 1.0
        out = overlay(img, att, (10, 12, 24, 26))
        assert out[12, 10].tolist() == list(GT_COLOR)
        assert out[0, 0].tolist() == list(ATTENTION_BOX_COLOR)
        assert out[7, 7].tolist() == list(ATTENTION_BOX_COLOR)

    def test_draw_box_clipped(self):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        draw_box(rgb, (-2, -2, 10, 10), (1, 2, 3))
        assert rgb[0, 0].tolist() == [1, 2, 3] and rgb[3, 3].tolist() == [1, 2, 3]
        assert rgb[1, 1].tolist() == [0, 0, 0]

    def test_export_sample(self, tmp_path):
        att = np.random.default_rng(0).uniform(size=(3, 4, 4))
        img = np.random.default_rng(1).uniform(size=(3, 32, 32))
        paths = export_sample(tmp_path, 7, img, att, (0, 0, 14, 14), heads=[0, 2])
        assert [p.name for p in paths] == [
            "sample0007_image.ppm",
            "sample0007_head00.ppm",
            "sample0007_head02.ppm",
            "sample0007_overlay.ppm",
        ]
        first = [p.read_bytes() for p in paths]
        export_sample(tmp_path, 7, img, att, (0, 0, 14, 14), heads=[0, 2])
        assert [p.read_bytes() for p in paths] == first


class TestPlots:
    def test_byte_identical_reruns(self, tmp_path):
        for i in range(2):
            plot_training_curves([2.0, 1.0, 0.5], [0.2, 0.5, 0.9], tmp_path / f"c{i}.png", title="run")
            plot_ablation(["a", "b"], [0.3, 0.4], [0.01, 0.02], tmp_path / f"a{i}.png", "mIoU", "strategy")
            plot_cmc([0.5, 0.8, 1.0], tmp_path / f"m{i}.png")
        for stem in "cam":
            a, b = (tmp_path / f"{stem}0.png").read_bytes(), (tmp_path / f"{stem}1.png").read_bytes()
            assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"

    def test_errors(self, tmp_path):
        with pytest.raises(ValueError):
            plot_training_curves([], [], tmp_path / "x.png")
        with pytest.raises(ValueError):
            plot_ablation(["a"], [1.0, 2.0], None, tmp_path / "x.png", "m", "axis")
        with pytest.raises(ValueError):
            plot_cmc([], tmp_path / "x.png")
