import numpy as np
import pytest

from oracles import random_instance
from tcnn.formats import (
    format_annotations,
    format_anchors,
    format_config,
    format_detections,
    parse_annotations,
    parse_config,
    parse_detections,
    read_anchors,
    write_anchors,
)
from tcnn.synth import SynthSpec, generate
from tcnn.tensor_io import FormatError, decode_tensor, encode_tensor, load_checkpoint, read_tensor, save_checkpoint, write_tensor


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((3, 2, 4, 5)).astype(np.float32)
        write_tensor(tmp_path / "x.tcnt", x)
        y = read_tensor(tmp_path / "x.tcnt")
        assert y.dtype == np.float32
        np.testing.assert_array_equal(x, y)
        assert encode_tensor(y) == (tmp_path / "x.tcnt").read_bytes()

    def test_header_layout(self):
        buf = encode_tensor(np.zeros((2, 3)))
        assert buf[:4] == b"TCNT" and buf[4] == 1 and buf[5] == 2
        assert int.from_bytes(buf[6:10], "little") == 2 and len(buf) == 14 + 24

    def test_scalar_and_empty(self):
        assert decode_tensor(encode_tensor(np.float32(2.5))) == 2.5
        assert decode_tensor(encode_tensor(np.zeros((0, 3)))).shape == (0, 3)

    @pytest.mark.parametrize("buf", [b"XXXX\x01\x01", b"TCNT\x02\x00", b"TCNT\x01\x01\x02\x00\x00\x00" + b"\x00" * 4])
    def test_corrupt(self, buf):
        with pytest.raises(FormatError):
            decode_tensor(buf)

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        params = {"b.weights": rng.standard_normal((4, 3)), "a.bias": rng.standard_normal(4)}
        save_checkpoint(tmp_path / "ck", params)
        back = load_checkpoint(tmp_path / "ck")
        assert set(back) == set(params)
        for k in params:
            np.testing.assert_array_equal(back[k], params[k].astype(np.float32))
        save_checkpoint(tmp_path / "ck2", back)
        for f in sorted(p.name for p in (tmp_path / "ck").iterdir()):
            assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()


class TestTextFormats:
    def test_annotations_byte_identical(self):
        anns = [a for _, a in generate(SynthSpec(num_videos=4, untrimmed=True, frames_per_video=24, seed=2))]
        text = format_annotations(anns)
        back = parse_annotations(text)
        assert format_annotations(back) == text
        assert [a.label for a in back] == [a.label for a in anns]
        assert "-1" in text

    def test_annotation_line_shape(self):
        line = format_annotations(generate(SynthSpec(num_videos=1))[0][1:])[:-1].splitlines()[0]
        assert len(line.split()) == 7

    def test_annotations_errors(self):
        with pytest.raises(ValueError):
            parse_annotations("v 0 1 1 2 3\n")
        with pytest.raises(ValueError):
            parse_annotations("v 0 -1\nv 2 -1\n")

    def test_detections_byte_identical(self):
        dets, _ = random_instance(np.random.default_rng(4))
        text = format_detections(dets)
        assert format_detections(parse_detections(text)) == text

    def test_detections_sorted(self):
        dets, _ = random_instance(np.random.default_rng(5))
        back = parse_detections(format_detections(dets))
        keys = [(d.video_id, -d.confidence) for d in back]
        assert keys == sorted(keys)

    def test_truncated_detection(self):
        with pytest.raises(ValueError):
            parse_detections("v 1 0.5 2\n0 1 1 2 2\n")

    def test_anchors_byte_identical(self, tmp_path):
        anchors = np.random.default_rng(6).uniform(0.1, 0.5, (12, 2))
        write_anchors(tmp_path / "a.txt", anchors)
        text = (tmp_path / "a.txt").read_text()
        assert format_anchors(read_anchors(tmp_path / "a.txt")) == text
        assert len(text.splitlines()) == 12

    def test_config(self):
        text = "lr_initial=0.001\n# comment\n\nseed = 3\n"
        cfg = parse_config(text)
        assert cfg == {"lr_initial": "0.001", "seed": "3"}
        assert parse_config(format_config(cfg)) == cfg
        with pytest.raises(ValueError):
            parse_config("novalue\n")
