import json
import struct

import numpy as np
import pytest

from ctxgcn import io_formats
from ctxgcn.cli import run_command
from ctxgcn.errors import FormatError, ValidationError
from ctxgcn.experiment import default_head_config, make_gcn
from ctxgcn.feature_stub import SynthSpec, synth_generate
from ctxgcn.gcn_head import GraphHeadConfig


def tiny_dataset(seed=5):
    spec = SynthSpec(num_classes=2, train_videos_per_class=2,
                     test_videos_per_class=1)
    return synth_generate(spec, seed)


# ---------------------------------------------------------------------------
# feature-map container
# ---------------------------------------------------------------------------


class TestFeatureMapFormat:
    def test_round_trip(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(3, 4, 5, 6))
        path = tmp_path / "x.fmap"
        io_formats.save_feature_map(path, values)
        back = io_formats.load_feature_map(path)
        np.testing.assert_allclose(back.values, values.astype(np.float32), atol=0)

    def test_hand_built_minimal_payload(self):
        payload = (b"FMAP" + struct.pack("<I", 1) + struct.pack("<4I", 1, 1, 1, 1)
                   + struct.pack("<f", 2.0))
        assert len(payload) == 28
        arr = io_formats.parse_feature_map(payload)
        assert arr.shape == (1, 1, 1, 1)
        assert arr[0, 0, 0, 0] == 2.0

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="byte 0"):
            io_formats.parse_feature_map(b"JUNK" + b"\x00" * 24)

    def test_bad_version(self):
        payload = b"FMAP" + struct.pack("<I", 9) + b"\x00" * 20
        with pytest.raises(FormatError, match="version 9"):
            io_formats.parse_feature_map(payload)

    def test_truncated_values(self, tmp_path):
        values = np.ones((1, 1, 2, 2))
        payload = io_formats.feature_map_bytes(values)
        with pytest.raises(FormatError, match="expected"):
            io_formats.parse_feature_map(payload[:-4])

    def test_non_4d_rejected(self):
        with pytest.raises(ValidationError):
            io_formats.feature_map_bytes(np.ones((2, 2)))


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def write_annotations(tmp_path, doc):
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps(doc))
    return path


class TestAnnotations:
    def test_minimal_document(self, tmp_path):
        doc = {"videos": [{
            "id": "v0", "num_frames": 48,
            "tubes": [{"id": 0, "boxes": [
                {"frame": 0, "x1": 0, "y1": 0, "x2": 10, "y2": 10}]}],
            "instances": [{"id": 0, "class": 1, "keyframes": [
                {"frame": 0, "box": [0, 0, 10, 10], "objects": [[20, 20, 30, 30]]},
            ]}],
        }]}
        videos = io_formats.load_annotations(write_annotations(tmp_path, doc))
        v = videos["v0"]
        assert v["num_frames"] == 48
        assert v["tubes"][0].boxes[0].x2 == 10
        inst = v["instances"][0]
        assert inst.label == 1
        assert inst.object_boxes[0][0].x1 == 20

    def test_six_keyframes_rejected(self, tmp_path):
        kf = {"frame": 0, "box": [0, 0, 1, 1]}
        doc = {"videos": [{"id": "v", "num_frames": 8,
                           "instances": [{"class": 0, "keyframes": [kf] * 6}]}]}
        with pytest.raises(ValidationError, match=r"instances\[0\]"):
            io_formats.load_annotations(write_annotations(tmp_path, doc))

    def test_degenerate_box_rejected_with_path(self, tmp_path):
        doc = {"videos": [{"id": "v", "num_frames": 8,
                           "tubes": [{"boxes": [
                               {"frame": 0, "x1": 5, "y1": 0, "x2": 5, "y2": 5}]}]}]}
        with pytest.raises(ValidationError, match=r"tubes\[0\].boxes\[0\]"):
            io_formats.load_annotations(write_annotations(tmp_path, doc))

    def test_invalid_json_is_format_error(self, tmp_path):
        path = tmp_path / "annotations.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            io_formats.load_annotations(path)

    def test_synth_round_trip(self, tmp_path):
        ds = tiny_dataset()
        doc = io_formats.annotations_doc(ds.train)
        path = write_annotations(tmp_path, doc)
        videos = io_formats.load_annotations(path)
        assert set(videos) == {v.video_id for v in ds.train}
        v0 = ds.train[0]
        back = videos[v0.video_id]
        assert len(back["tubes"]) == len(v0.tubes)
        assert back["instances"][0].label == v0.gt.label
        assert back["instances"][0].keyframes == v0.gt.keyframes


class TestDatasetRoundTrip:
    def test_save_load_identical(self, tmp_path):
        ds = tiny_dataset()
        io_formats.save_dataset(ds, tmp_path)
        back = io_formats.load_dataset(tmp_path)
        assert len(back.train) == len(ds.train)
        assert len(back.test) == len(ds.test)
        for a, b in zip(ds.train + ds.test, back.train + back.test):
            assert a.video_id == b.video_id
            assert a.label == b.label
            assert a.blob_cell == b.blob_cell
            np.testing.assert_allclose(b.volume, a.volume.astype(np.float32),
                                       atol=0)
            assert [t.boxes for t in a.tubes] == [t.boxes for t in b.tubes]


class TestCheckpoint:
    def test_round_trip_restores_values(self, tmp_path):
        ds = tiny_dataset()
        model = make_gcn(ds, default_head_config(ds, embed_dim=8), 3)
        params = io_formats.model_param_order(model.params, model.tail)
        doc = {"type": "gcn", "head": io_formats.head_config_doc(model.config)}
        path = tmp_path / "model.ckpt"
        io_formats.save_checkpoint(path, doc, params)

        doc2, flat = io_formats.load_checkpoint(path)
        assert doc2 == doc
        model2 = make_gcn(ds, default_head_config(ds, embed_dim=8), 999)
        params2 = io_formats.model_param_order(model2.params, model2.tail)
        io_formats.assign_flat(params2, flat)
        for a, b in zip(params, params2):
            np.testing.assert_allclose(b.value, a.value.astype(np.float32), atol=0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            io_formats.load_checkpoint(path)

    def test_wrong_param_count_rejected(self, tmp_path):
        ds = tiny_dataset()
        model = make_gcn(ds, default_head_config(ds, embed_dim=8), 3)
        params = io_formats.model_param_order(model.params, model.tail)
        path = tmp_path / "model.ckpt"
        io_formats.save_checkpoint(path, {"type": "gcn"}, params)
        _, flat = io_formats.load_checkpoint(path)
        with pytest.raises(FormatError):
            io_formats.assign_flat(params, flat[:-1])

    def test_config_doc_round_trip(self):
        c = GraphHeadConfig(actor_dim=32, context_dim=24, embed_dim=16,
                            num_layers=2, graphs_per_layer=3, merge="sum",
                            use_location=False, num_classes=4)
        assert io_formats.head_config_from_doc(io_formats.head_config_doc(c)) == c


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """synth + train once; several CLI tests read the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 5,
        "out": str(root),
        "data": {"dir": str(root / "data")},
        "synth": {"num_classes": 2, "train_videos_per_class": 2,
                  "test_videos_per_class": 1},
        "model": {"type": "gcn", "embed_dim": 8},
        "training": {"base_lr": 0.02, "total_epochs": 3, "dropout_p": 0.1},
        "eval": {"num_clips": 3},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    assert run_command(["synth", "--config", str(cfg_path),
                        "--out", str(root / "data")]) == 0
    assert run_command(["train", "--config", str(cfg_path)]) == 0
    return root, cfg_path


class TestCli:
    def test_unknown_subcommand_is_64(self, capsys):
        assert run_command(["frobnicate"]) == 64
        assert "usage:" in capsys.readouterr().err
        assert run_command([]) == 64

    def test_bad_flag_is_64(self, capsys):
        assert run_command(["params", "--bogus"]) == 64

    def test_missing_config_is_validation_failure(self, capsys):
        assert run_command(["synth"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_nonexistent_config_file(self, tmp_path, capsys):
        assert run_command(["synth", "--config", str(tmp_path / "no.json")]) == 1
        capsys.readouterr()

    def test_missing_seed_rejected(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"out": str(tmp_path)}))
        assert run_command(["synth", "--config", str(path)]) == 1
        assert "seed" in capsys.readouterr().err

    def test_params_default_runs(self, capsys):
        assert run_command(["params"]) == 0
        out = capsys.readouterr().out
        assert "542,976" in out

    def test_params_table_contains_published_counts(self, capsys):
        assert run_command(["params", "--table"]) == 0
        out = capsys.readouterr().out
        for count in ("542,976", "1,085,952", "1,628,928",
                      "887,808", "1,906,688", "3,056,640"):
            assert count in out

    def test_gradcheck_passes(self, capsys):
        assert run_command(["gradcheck", "--seed", "4"]) == 0
        assert "max relative gradient error" in capsys.readouterr().out

    def test_train_then_eval(self, cli_workspace, capsys):
        root, cfg_path = cli_workspace
        assert (root / "model.ckpt").exists()
        assert (root / "loss_log.csv").read_text().startswith("epoch,lr,mean_loss")
        assert run_command(["eval", "--config", str(cfg_path)]) == 0
        assert "Video-mAP@0.5" in capsys.readouterr().out
        report = (root / "map_report.csv").read_text()
        assert report.startswith("class,ap")
        assert "mAP" in report

    def test_eval_without_checkpoint_fails(self, cli_workspace, tmp_path, capsys):
        root, cfg_path = cli_workspace
        cfg = json.loads(cfg_path.read_text())
        cfg["out"] = str(tmp_path)
        alt = tmp_path / "c.json"
        alt.write_text(json.dumps(cfg))
        assert run_command(["eval", "--config", str(alt)]) == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_attend_exports_images(self, cli_workspace, capsys):
        root, cfg_path = cli_workspace
        assert run_command(["attend", "--config", str(cfg_path)]) == 0
        capsys.readouterr()
        pngs = list((root / "attention").glob("*.png"))
        amaps = list((root / "attention").glob("*.amap"))
        assert len(pngs) == 2 and len(amaps) == 2
        pixel = io_formats.parse_feature_map(amaps[0].read_bytes())
        assert pixel.shape[:2] == (1, 1)
        assert pixel.sum() == pytest.approx(1.0, abs=1e-4)

    def test_recall_writes_curves(self, cli_workspace, capsys):
        root, cfg_path = cli_workspace
        assert run_command(["recall", "--config", str(cfg_path)]) == 0
        assert "recall at t=0.2" in capsys.readouterr().out
        header = (root / "recall_curves.csv").read_text().splitlines()[0]
        assert header == "threshold,class_0,class_1,overall"

    def test_corrupt_checkpoint_is_input_failure(self, cli_workspace, tmp_path, capsys):
        root, cfg_path = cli_workspace
        cfg = json.loads(cfg_path.read_text())
        cfg["out"] = str(tmp_path)
        (tmp_path / "model.ckpt").write_bytes(b"garbage")
        alt = tmp_path / "c.json"
        alt.write_text(json.dumps(cfg))
        assert run_command(["eval", "--config", str(alt)]) == 1
        capsys.readouterr()


class TestCsvFormatting:
    def test_floats_are_stable_shortest_repr(self, tmp_path):
        path = tmp_path / "t.csv"
        io_formats.write_csv(path, ["a", "b"], [[0.1, 1.0], [1e-7, 123456789.0]])
        assert path.read_text() == "a,b\n0.1,1\n1e-07,123456789\n"

    def test_format_float(self):
        assert io_formats.format_float(0.5) == "0.5"
        assert io_formats.format_float(1 / 3) == "0.3333333333"
