import json

import numpy as np
import pytest

from locinv.config import RunConfig, valid_keys
from locinv.dataset import (bundled_toy_manifest, build_coco_manifest, coco_edit_groups,
                            load_image, load_manifest, write_toy_manifest)
from locinv.errors import InputError
from locinv.losses import LossConfig


def test_run_config_defaults():
    cfg = RunConfig()
    assert cfg.sampler.guidance_scale == 7.5 and cfg.sampler.T == 50
    assert cfg.p2p.cross_replace_fraction == 0.8 and cfg.p2p.self_replace_fraction == 0.4
    assert cfg.loss_for("segmentation") == LossConfig.segmentation()
    assert cfg.loss_for("detection") == LossConfig.detection()
    p = cfg.pipeline_config("segmentation")
    assert (p.nti_inner_iters, p.nti_step_size, p.nti_tolerance) == (10, 0.01, 1e-5)


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig().with_overrides(["sampler.T=20", "loss.sim.lam=0", "seed=3",
                                      "p2p.local_blend_positions=[3]"])
    path = cfg.save(tmp_path / "c.json")
    back = RunConfig.load(path)
    assert back == cfg
    assert back.loss_for("detection").sim.lam == 0
    assert back.p2p.local_blend_positions == (3,)


@pytest.mark.parametrize("bad", [{"sampler": {"steps": 3}}, {"bogus": 1}, {"loss": {"x": 1}},
                                 {"adapter": {"kind": "dalle"}}])
def test_unknown_keys_rejected(bad):
    with pytest.raises(InputError):
        RunConfig.from_dict(bad)


def test_override_errors_name_valid_keys():
    with pytest.raises(InputError, match="valid"):
        RunConfig().with_overrides(["loss.sim.gamma=1"])
    with pytest.raises(InputError):
        RunConfig().with_overrides(["sampler.T"])
    assert "sampler.T" in valid_keys()


def test_bundled_manifest_loads():
    m = load_manifest(bundled_toy_manifest())
    assert len(m) == 6
    kinds = {e.prior_kind for e in m}
    assert kinds == {"segmentation", "detection"}
    for e in m:
        assert e.nouns and e.edit_task
        img = load_image(e.image_path)
        assert img.shape == (3, 64, 64) and img.dtype == np.float32


def test_bundled_manifest_is_reproducible(tmp_path):
    path = write_toy_manifest(tmp_path)
    ours = json.loads(path.read_text())
    shipped = json.loads(bundled_toy_manifest().read_text())
    assert ours == shipped
    for e in ours["entries"]:
        assert np.array_equal(load_image(tmp_path / e["image_path"]),
                              load_image(bundled_toy_manifest().parent / e["image_path"]))


def test_manifest_validation(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"entries": [
        {"id": "x", "image_path": "missing.png", "prompt": "a square", "nouns": [{"word": "square",
                                                                                  "box": [0, 0, 1, 1]}]}]}))
    with pytest.raises(InputError, match="does not exist"):
        load_manifest(tmp_path / "m.json")
    src = load_manifest(bundled_toy_manifest()).entries[0]
    (tmp_path / "m.json").write_text(json.dumps({"entries": [
        {"id": "x", "image_path": str(src.image_path), "prompt": "a square", "nouns": []}]}))
    with pytest.raises(InputError, match="at least one noun"):
        load_manifest(tmp_path / "m.json")


def test_coco_groups_table():
    groups = coco_edit_groups()
    assert len(groups) == 13
    single = [g for g in groups if g["split"] == "single"]
    multi = [g for g in groups if g["split"] == "multi"]
    assert [g["images"] for g in single] == [25, 22, 17, 22, 46, 37, 45]
    assert [g["images"] for g in multi] == [2, 31, 37, 25, 2, 4]
    assert sum(g["images"] for g in groups) == 315
    assert {"airplane": "seaplane", "cat": "cougar"}.items() <= {
        g["edit"][0]: g["edit"][1] for g in single}.items()


def test_coco_manifest_builder(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((20, 40, 3), np.uint8)).save(tmp_path / "1.jpg")
    coco = {
        "categories": [{"id": 17, "name": "cat"}, {"id": 18, "name": "dog"}],
        "images": [{"id": 1, "file_name": "1.jpg", "height": 20, "width": 40}],
        "annotations": [
            {"image_id": 1, "category_id": 17, "bbox": [0, 0, 10, 10],
             "segmentation": [[0, 0, 10, 0, 10, 10, 0, 10]], "iscrowd": 0},
            {"image_id": 1, "category_id": 18, "bbox": [20, 5, 10, 10],
             "segmentation": [[20, 5, 30, 5, 30, 15, 20, 15]], "iscrowd": 0},
        ],
    }
    (tmp_path / "inst.json").write_text(json.dumps(coco))
    groups = [g for g in coco_edit_groups() if g["objects"] == ["cat", "dog"]]
    path = build_coco_manifest(tmp_path / "inst.json", tmp_path, tmp_path / "out", groups)
    m = load_manifest(path)
    assert len(m) == 1
    e = m.entries[0]
    assert e.prompt == "a cat and a dog" and e.edit_task["target_word"] == "fox"
    det = load_manifest(build_coco_manifest(tmp_path / "inst.json", tmp_path, tmp_path / "det",
                                            groups, prior="detection"))
    assert det.entries[0].nouns[0].box == (0.0, 0.0, 0.25, 0.5)
