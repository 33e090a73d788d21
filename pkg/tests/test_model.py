import numpy as np
import pytest

from tcnn.model import TCNN
from tcnn.network import PRESETS
from tcnn.pipeline import classify_video, detect_video
from tcnn.synth import SynthSpec, generate_video

ANCHORS = np.array([[0.2, 0.3], [0.25, 0.25]])


class TestModel:
    def test_parameter_groups(self):
        m = TCNN(PRESETS["desk"], ANCHORS, 3)
        groups = {k.split(".", 1)[0] for k in m.params()}
        assert groups == {"tpn_backbone", "recog_backbone", "tpn", "recog"}

    def test_seed_controls_weights(self):
        a = TCNN(PRESETS["desk"], ANCHORS, 3, seed=1).params()
        b = TCNN(PRESETS["desk"], ANCHORS, 3, seed=1).params()
        c = TCNN(PRESETS["desk"], ANCHORS, 3, seed=2).params()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["tpn.score.weights"], c["tpn.score.weights"])

    def test_copy_backbone(self):
        m = TCNN(PRESETS["desk"], ANCHORS, 3)
        m.params()["recog_backbone.conv1.kernel"][...] += 1.0
        assert not m.backbones_equal()
        m.copy_backbone("recog_backbone", "tpn_backbone")
        assert m.backbones_equal()

    @pytest.mark.parametrize("skip", ["conv2", None])
    def test_save_load(self, tmp_path, skip):
        m = TCNN(PRESETS["desk"], ANCHORS, 3, skip, seed=4)
        m.save(tmp_path / "ck")
        back = TCNN.load(tmp_path / "ck")
        assert back.config() == m.config()
        for k, v in m.params().items():
            np.testing.assert_array_equal(back.params()[k], v.astype(np.float32))

    def test_load_mismatch(self, tmp_path):
        TCNN(PRESETS["desk"], ANCHORS, 3).save(tmp_path / "ck")
        (tmp_path / "ck" / "tpn.score.bias.tcnt").unlink()
        with pytest.raises(OSError):
            TCNN.load(tmp_path / "ck")


class TestPipeline:
    def setup_method(self):
        self.model = TCNN(PRESETS["desk"], ANCHORS, 3, seed=0)
        self.video, self.ann = generate_video(SynthSpec(frames_per_video=20), 0)

    def test_detection_fields(self):
        dets = detect_video(self.model, self.video, "v", threshold=0.0, k=5)
        assert dets and all(1 <= d.class_id <= 3 for d in dets)
        assert all(max(d.boxes) < 20 and len(d.boxes) == 20 for d in dets)
        conf = [d.confidence for d in dets]
        assert conf == sorted(conf, reverse=True)

    def test_high_threshold_still_links(self):
        # every clip keeps at least its best proposal, so linking never sees an empty clip
        detect_video(self.model, self.video, "v", threshold=1.0, k=3)

    def test_classify_video(self):
        assert classify_video(self.model, self.video) in (1, 2, 3)
