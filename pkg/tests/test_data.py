import numpy as np
import pytest

from srpose_kit import baseline as B
from srpose_kit import geometry as G
from srpose_kit.data import GenConfig, generate_dataset, generate_pair, load_dataset, save_dataset
from srpose_kit.errors import ConfigError


def _cfg(**kw):
    base = dict(pairs=8, val_pairs=3, seed=3)
    base.update(kw)
    return GenConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(scenario="x")
    with pytest.raises(ConfigError):
        GenConfig(clutter=1.0)
    with pytest.raises(ConfigError):
        GenConfig(max_rot_deg=200)
    with pytest.raises(ConfigError):
        GenConfig(fx_min=900, fx_max=300)
    with pytest.raises(ConfigError):
        GenConfig(pairs=-1)


def test_generation_deterministic_and_split_independent():
    cfg = _cfg()
    a, b = generate_pair(cfg, "train", 4), generate_pair(cfg, "train", 4)
    assert np.array_equal(a.kps1.coords, b.kps1.coords) and np.array_equal(a.gt.R, b.gt.R)
    v = generate_pair(cfg, "val", 4)
    assert not np.array_equal(a.gt.R, v.gt.R)
    threaded = generate_dataset(cfg, "train", threads=3)
    serial = generate_dataset(cfg, "train")
    assert all(np.array_equal(x.kps2.coords, y.kps2.coords) for x, y in zip(threaded, serial))


def test_rotation_range_respected():
    cfg = _cfg(pairs=40, max_rot_deg=45.0)
    angles = [np.degrees(G.rotation_angle(s.gt.R, np.eye(3))) for s in generate_dataset(cfg)]
    assert max(angles) <= 45.0 + 1e-9
    cfg = _cfg(pairs=20, min_rot_deg=10.0, max_rot_deg=20.0)
    angles = [np.degrees(G.rotation_angle(s.gt.R, np.eye(3))) for s in generate_dataset(cfg)]
    assert min(angles) >= 10.0 - 1e-9 and max(angles) <= 20.0 + 1e-9


def test_camera_to_world_pairs_are_covisible_and_padded():
    cfg = _cfg(pairs=20)
    for s in generate_dataset(cfg):
        assert len(s.kps1) == len(s.kps2) == cfg.n_keypoints
        shared = np.intersect1d(s.kps1.ids[s.kps1.ids >= 0], s.kps2.ids[s.kps2.ids >= 0])
        assert len(shared) >= min(cfg.min_shared, cfg.n_keypoints // 2)
        assert s.prompt is None and np.linalg.norm(s.gt.t) > 1e-3


def test_object_pairs_have_prompt_around_object():
    cfg = _cfg(scenario="o2c", pairs=15)
    for s in generate_dataset(cfg):
        assert s.prompt is not None and s.model_points is not None
        inside = s.prompt.contains(s.kps1.coords) & s.kps1.valid_mask
        assert inside.sum() >= 4
        # the relative pose carries object points from view 1 to view 2
        obj_ids = set(range(len(s.model_points)))
        both = [i for i in s.kps1.ids if i in obj_ids and i in set(s.kps2.ids)]
        assert both


def test_noiseless_pairs_recovered_by_baseline():
    cfg = _cfg(pairs=10, noise_px=0.0, noise_desc=0.0, clutter=0.0)
    for s in generate_dataset(cfg):
        m = B.match_mutual_nn(s.kps1, s.kps2)
        res = B.ransac_essential(m, s.kps1, s.kps2, s.K1, s.K2)
        assert G.rotation_angle_error(res.pose.R, s.gt.R) < 0.5


def test_randomized_intrinsics_within_range():
    cfg = _cfg(pairs=20, fx_min=300.0, fx_max=900.0)
    fx = [k.fx for s in generate_dataset(cfg) for k in (s.K1, s.K2)]
    assert 300.0 <= min(fx) and max(fx) <= 900.0 and np.std(fx) > 50


@pytest.mark.parametrize("scenario", ["c2w", "o2c"])
def test_dataset_disk_round_trip(tmp_path, scenario):
    cfg = _cfg(scenario=scenario)
    train, val = generate_dataset(cfg, "train"), generate_dataset(cfg, "val")
    save_dataset(tmp_path, [train, val])
    back = load_dataset(tmp_path, "val", d=cfg.d)
    assert len(back) == len(val)
    for a, b in zip(val, back):
        assert np.array_equal(a.kps1.coords[a.kps1.valid_mask], b.kps1.coords[b.kps1.valid_mask])
        assert np.abs(a.kps2.descriptors - b.kps2.descriptors).max() < 1e-12
        assert np.array_equal(a.gt.R, b.gt.R) and np.array_equal(a.gt.t, b.gt.t)
        assert a.K2 == b.K2 and a.scenario == b.scenario
        assert np.array_equal(a.kps1.ids[a.kps1.valid_mask], b.kps1.ids[b.kps1.valid_mask])
        if scenario == "o2c":
            assert a.prompt == b.prompt and np.array_equal(a.model_points, b.model_points)
    assert GenConfig.from_manifest(back.manifest) == cfg


def test_load_rejects_non_dataset(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset(tmp_path)
    (tmp_path / "manifest").write_text("format=other\n")
    with pytest.raises(ConfigError):
        load_dataset(tmp_path)
