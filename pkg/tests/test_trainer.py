import json

import numpy as np
import pytest

from laserseg import semantics as sem
from laserseg import trainer as tr
from laserseg.autodiff import Tensor
from laserseg.dataio import (default_scene_spec, generate_synthetic_scene, load_manifest, load_training_view,
                             read_text)
from laserseg.errors import ConfigError, DimensionError, FormatError, LoadError

SMALL = dict(resolution=10, rays_per_batch=64, samples_per_ray=12, geometry_iters=4, geometry_rays=64,
             total_iters=9, tq_rank=2, log_every=3)


@pytest.fixture(scope="module")
def scene(tiny_scene):
    m = load_manifest(tiny_scene)
    return m, read_text(m.path(m.text))


def small_config(**kw):
    return tr.TrainConfig(**{**SMALL, **kw})


def grids(state):
    return {k: v.data.copy() for k, v in state.parameters().items()}


class TestConfig:
    def test_defaults_are_the_desk_schedule(self):
        cfg = tr.TrainConfig()
        assert cfg.total_iters == 3000
        assert cfg.phase2_start == 1000 and cfg.sct_start == 1600
        assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.tau) == (0.2, 0.3, 0.5, 0.07)
        assert (cfg.lr_decay, cfg.geometry_lr_decay) == (0.1, 0.1)

    @pytest.mark.parametrize("kw,field", [
        (dict(phase1_fraction=0.6, sct_start_fraction=0.5), "phase1_fraction"),
        (dict(lr_grids=0.0), "lr_grids"),
        (dict(alpha=1.5), "alpha"),
        (dict(precision="float16"), "precision"),
        (dict(attention_variant="fast"), "attention_variant"),
        (dict(total_iters=-1), "total_iters"),
    ])
    def test_validation_names_the_field(self, kw, field):
        with pytest.raises(ConfigError, match=f"^{field}"):
            tr.TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = small_config(seed=3)
        assert tr.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("doc,match", [({"total_itres": 5}, "unknown"), ({"total_iters": 2.5}, "integer"),
                                           ({"use_tq": 1}, "boolean"), ({"alpha": "high"}, "number")])
    def test_from_dict_errors(self, doc, match):
        with pytest.raises(ConfigError, match=match):
            tr.TrainConfig.from_dict(doc)

    def test_load_config(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            tr.load_config(tmp_path / "bad.json")
        with pytest.raises(LoadError):
            tr.load_config(tmp_path / "missing.json")
        (tmp_path / "ok.json").write_text('{"total_iters": 7}')
        assert tr.load_config(tmp_path / "ok.json").total_iters == 7


def test_learning_rate_schedule_reaches_decay():
    assert tr._learning_rate(0.02, 0, 100, 0.1) == 0.02
    assert tr._learning_rate(0.02, 100, 100, 0.1) == pytest.approx(0.002)
    assert tr._learning_rate(0.02, 50, 100, 0.1) == pytest.approx(0.02 * 0.1 ** 0.5)


def test_zero_iterations_return_initial_state(scene):
    m, text = scene
    cfg = small_config(total_iters=0)
    init = tr.init_state(cfg, text.dim)
    before = tr.encode_checkpoint(init)
    state, report = tr.train(m, cfg, text, state=init)
    assert tr.encode_checkpoint(state) == before
    assert report.intervals == [] and report.geometry_intervals == []


def test_init_density_is_nearly_transparent():
    state = tr.init_state(small_config(density_scale=25.0), 8)
    sigma = np.logaddexp(0, state.volumes.density.data) * 25.0
    np.testing.assert_allclose(sigma, 0.1, rtol=1e-5)


@pytest.fixture(scope="module")
def snapshots(scene):
    m, text = scene
    cfg = small_config()
    state, _ = tr.train(m, cfg, text, stop_at=cfg.geometry_iters)
    after_geometry = grids(state)
    state, _ = tr.train(m, cfg, text, state=state, stop_at=cfg.geometry_iters + cfg.phase2_start)
    after_phase1 = grids(state)
    state, _ = tr.train(m, cfg, text, state=state)
    return after_geometry, after_phase1, grids(state)


@pytest.fixture(scope="module")
def trained(scene):
    m, text = scene
    state, _ = tr.train(m, small_config(), text)
    return state


class TestFreezing:
    def test_density_never_changes_after_geometry(self, snapshots):
        geo, p1, final = snapshots
        np.testing.assert_array_equal(p1["density"], geo["density"])
        np.testing.assert_array_equal(final["density"], geo["density"])

    def test_appearance_frozen_in_phase_one_only(self, snapshots):
        geo, p1, final = snapshots
        np.testing.assert_array_equal(p1["appearance"], geo["appearance"])
        np.testing.assert_array_equal(p1["bg_rgb"], geo["bg_rgb"])
        assert not np.array_equal(final["appearance"], p1["appearance"])

    @pytest.mark.parametrize("name", ["feature", "label", "adapter_up", "tq_transient"])
    def test_semantic_parameters_train_in_phase_one(self, snapshots, name):
        geo, p1, _ = snapshots
        assert not np.array_equal(p1[name], geo[name])


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, trained, tmp_path):
        tr.save_checkpoint(trained, tmp_path / "a.ckpt")
        tr.save_checkpoint(tr.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_moments_and_step_round_trip(self, trained):
        back = tr.decode_checkpoint(tr.encode_checkpoint(trained))
        assert back.step == trained.step
        for group in tr.OPTIMIZER_GROUPS:
            a, b = trained.optimizers[group], back.optimizers[group]
            assert a.step_count == b.step_count
            for k in a.first_moment:
                np.testing.assert_array_equal(a.second_moment[k], b.second_moment[k])

    def test_mismatched_dimension(self, trained):
        with pytest.raises(DimensionError):
            tr.decode_checkpoint(tr.encode_checkpoint(trained), feature_dim=16)

    def test_version_mismatch(self, trained):
        buf = bytearray(tr.encode_checkpoint(trained))
        buf[4] = 2
        with pytest.raises(LoadError, match="version"):
            tr.decode_checkpoint(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 100, -1])
    def test_truncation(self, trained, cut):
        buf = tr.encode_checkpoint(trained)
        with pytest.raises(FormatError):
            tr.decode_checkpoint(buf[:cut])

    def test_bad_magic(self, trained):
        with pytest.raises(FormatError, match="magic"):
            tr.decode_checkpoint(b"NOPE" + tr.encode_checkpoint(trained)[4:])

    def test_predict_rejects_other_dimension(self, trained, scene):
        m, _ = scene
        other = sem.TextFeatureSet(["a", "b"], np.eye(2, 16))
        with pytest.raises(DimensionError):
            tr.predict_view(trained, m.camera(0), other, m.near, m.far)

    def test_evaluate_reports_valid_scores(self, trained, scene):
        m, text = scene
        result = tr.evaluate(trained, m, text)
        assert 0.0 <= result.mean_iou <= 1.0 and 0.0 <= result.accuracy <= 1.0
        assert [v["frame"] for v in result.per_view] == m.split_indices("test")


def test_resume_is_step_for_step_identical(scene):
    m, text = scene
    cfg = small_config(precision="float64", log_every=1, total_iters=8)
    full_log, resumed_log = [], []
    full, _ = tr.train(m, cfg, text, progress=lambda stage, e: full_log.append((stage, e)))
    mid = cfg.geometry_iters + cfg.sct_start + 1
    part, _ = tr.train(m, cfg, text, stop_at=mid, progress=lambda stage, e: resumed_log.append((stage, e)))
    restored = tr.decode_checkpoint(tr.encode_checkpoint(part))
    done, _ = tr.train(m, cfg, text, state=restored, progress=lambda stage, e: resumed_log.append((stage, e)))
    assert resumed_log == full_log
    assert tr.encode_checkpoint(done) == tr.encode_checkpoint(full)


def test_resume_with_other_config_is_rejected(scene):
    m, text = scene
    state = tr.init_state(small_config(), text.dim)
    with pytest.raises(ConfigError):
        tr.train(m, small_config(seed=5), text, state=state)


def test_non_finite_loss_aborts_with_last_good_state(scene, tmp_path, monkeypatch):
    m, text = scene
    cfg = small_config()
    real = sem.aug_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        out = real(*args, **kwargs)
        return Tensor(np.array(np.nan)) if calls["n"] == 3 else out

    monkeypatch.setattr(sem, "aug_loss", flaky)
    path = tmp_path / "last_good.ckpt"
    with pytest.raises(tr.TrainingAborted) as info:
        tr.train(m, cfg, text, abort_checkpoint=path)
    assert info.value.term == "aug"
    assert info.value.checkpoint == str(path)
    saved = tr.load_checkpoint(path)
    assert saved.step == cfg.geometry_iters + 2
    assert all(np.all(np.isfinite(t.data)) for t in saved.parameters().values())
    monkeypatch.setattr(sem, "aug_loss", real)
    clean, _ = tr.train(m, cfg, text, stop_at=cfg.geometry_iters + 2)
    assert tr.encode_checkpoint(saved) == tr.encode_checkpoint(clean)


def test_ce_leaves_logits_alone_by_default(scene):
    """With only the ensemble term active the rendered feature grid gets no gradient."""
    m, text = scene
    cfg = small_config(lambda_s=0.0, lambda_r=0.0, lambda_aug=0.0, use_tq=False, use_adapter=False)
    state = tr.init_state(cfg, text.dim)
    pool = tr.build_ray_pool(m, m.split_indices("train"), text, cfg.dtype)
    state.step = cfg.geometry_iters
    before = state.volumes.feature.data.copy()
    tr.segmentation_step(state, pool, text, 0)
    np.testing.assert_array_equal(state.volumes.feature.data, before)
    assert state.volumes.label.grad is not None and np.any(state.volumes.label.grad != 0)


def test_ray_pool_relevance_is_normalized(scene):
    m, text = scene
    pool = tr.build_ray_pool(m, [0], text)
    assert pool.relevance.shape == (m.height * m.width, text.num_classes)
    assert pool.relevance.min() == 0.0 and pool.relevance.max() == 1.0
    assert len(pool) == m.height * m.width


def test_clip_bounds_marks_misses():
    o = np.array([[-1.0, 0.5, 0.5], [-1.0, 5.0, 0.5]])
    d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    near, far, hit = tr.clip_bounds(o, d, 0.1, 3.0)
    assert hit.tolist() == [True, False]
    assert (near[0], far[0]) == (1.0, 2.0)


def test_inference_attends_over_the_whole_view(scene, trained):
    m, _ = scene
    camera = load_training_view(m, m.split_indices("train")[0]).camera
    pixels = camera.height * camera.width
    with tr._frozen(trained):
        default, _ = tr.render_view_features(trained, camera, m.near, m.far)
        whole, _ = tr.render_view_features(trained, camera, m.near, m.far, chunk=pixels)
        pieces, _ = tr.render_view_features(trained, camera, m.near, m.far, chunk=trained.config.rays_per_batch)
    np.testing.assert_array_equal(default, whole)
    assert not np.allclose(default, pieces)


@pytest.mark.slow
def test_desk_defaults_reduce_loss_every_window(desk_run):
    report = desk_run["report"]
    assert all(e["end"] - e["start"] == 200 for e in report.intervals)
    totals = [e["losses"]["total"] for e in report.intervals]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


@pytest.mark.slow
def test_distill_only_fits_noise_free_features(tmp_path):
    m = generate_synthetic_scene(default_scene_spec(feature_noise=0.0, image_size=32, num_views=10), tmp_path)
    text = read_text(m.path(m.text))
    cfg = tr.TrainConfig(use_adapter=False, use_tq=False, lambda_ce=0.0, lambda_aug=0.0, lambda_r=0.0,
                         geometry_iters=600, total_iters=600)
    state, _ = tr.train(m, cfg, text)
    cosines = []
    with tr._frozen(state):
        for idx in m.split_indices("train"):
            view = load_training_view(m, idx)
            feats, _ = tr.render_view_features(state, view.camera, m.near, m.far)
            gt = view.features.reshape(len(feats), -1)
            cosines.append(np.sum(feats * gt, 1) / (np.linalg.norm(feats, axis=1) * np.linalg.norm(gt, axis=1)))
    assert np.mean(np.concatenate(cosines)) > 0.99
