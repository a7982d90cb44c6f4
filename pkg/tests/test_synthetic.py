import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofu.harness.evaluate import subject_areas
from mofu.harness.synthetic import (SceneConfig, gen_synthetic, latent_to_video, load_dataset, make_prompt,
                                    save_dataset, video_to_latent)


def scenes_equal(a, b):
    return (a.prompt == b.prompt and a.subjects == b.subjects and np.array_equal(a.video, b.video)
            and np.array_equal(a.masks, b.masks)
            and all(np.array_equal(x.pixels, y.pixels) and np.array_equal(x.subject_mask, y.subject_mask)
                    for x, y in zip(a.references, b.references)))


def test_determinism():
    a, b = gen_synthetic(3, 6), gen_synthetic(3, 6)
    assert all(scenes_equal(x, y) for x, y in zip(a, b))
    c = gen_synthetic(4, 6)
    assert not all(scenes_equal(x, y) for x, y in zip(a, c))


def test_scene_depends_only_on_seed_and_index():
    assert scenes_equal(gen_synthetic(5, 2)[1], gen_synthetic(5, 7)[1])


def test_single_subject_half_scale_area():
    cfg = SceneConfig(frame_size=16, ref_size=16, min_subjects=1, max_subjects=1, scales=(0.5,))
    sc = gen_synthetic(0, 1, cfg)[0]
    assert sc.subjects[0].size == 8
    for f in range(cfg.n_frames):
        assert sc.masks[0, f].mean() == 0.25


def test_zoomed_reference_vs_scene_area():
    cfg = SceneConfig(frame_size=16, ref_size=10, min_subjects=1, max_subjects=1, scales=(0.25,),
                      occupancy=(0.8, 0.8))
    sc = gen_synthetic(1, 1, cfg)[0]
    # reference side round(0.8 * 10) = 8 -> 64 / 100; scene side 0.25 * 16 = 4 -> 16 / 256
    assert sc.references[0].area_ratio == 0.64
    assert sc.masks[0, 0].mean() == 0.0625


def test_subject_count_and_ratio_keys():
    for sc in gen_synthetic(2, 20):
        assert 1 <= len(sc.subjects) <= 3
        assert len(sc.scale_ratios) == len(sc.subjects) * (len(sc.subjects) - 1) // 2
        assert len({s.name for s in sc.subjects}) == len(sc.subjects)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ratios_recoverable_from_frames(seed):
    for sc in gen_synthetic(seed, 3):
        areas = subject_areas(sc.video, sc)
        assert np.array_equal(areas, sc.masks.sum(axis=(2, 3)))
        for (i, j), target in sc.scale_ratios.items():
            assert np.allclose(np.sqrt(areas[i] / areas[j]), target, rtol=0, atol=1e-12)
        # subjects stay inside the frame and never overlap
        assert np.all(sc.masks.sum(axis=0) <= 1)


def test_references_are_centred_squares():
    for sc in gen_synthetic(7, 5):
        for s, r in zip(sc.subjects, sc.references):
            assert r.subject_mask.sum() == s.ref_side ** 2
            assert np.all(r.pixels[:, r.subject_mask == 1] == s.level)


def test_prompt_encodes_ratio():
    sc = next(s for s in gen_synthetic(0, 30) if len(s.subjects) == 2)
    assert sc.prompt == make_prompt(sc.subjects)
    a, b = sc.subjects
    assert a.name in sc.prompt and b.name in sc.prompt
    assert "as large as" in sc.prompt or "smaller than" in sc.prompt


def test_config_errors():
    with pytest.raises(ValueError):
        SceneConfig(min_subjects=0)
    with pytest.raises(ValueError):
        SceneConfig(max_subjects=4)
    with pytest.raises(ValueError):
        gen_synthetic(0, 0)
    with pytest.raises(RuntimeError):
        gen_synthetic(0, 1, SceneConfig(frame_size=4, min_subjects=3, scales=(0.75,), max_retries=3))


def test_latent_codec_roundtrip():
    v = np.random.default_rng(0).random((1, 4, 8, 8))
    z = video_to_latent(v)
    assert z.shape == (4, 4, 4, 4) and z.min() >= -1 and z.max() <= 1
    assert np.max(np.abs(latent_to_video(z) - v)) < 1e-15
    assert z[1, 2, 3, 0] == 2 * v[0, 2, 6, 1] - 1  # channel = 2*dy + dx


def test_save_load(tmp_path):
    cfg = SceneConfig()
    scenes = gen_synthetic(9, 3, cfg)
    save_dataset(scenes, tmp_path / "ds", cfg)
    assert (tmp_path / "ds" / "manifest.json").exists()
    assert (tmp_path / "ds" / "scene_0000" / "frame_000.png").exists()
    back, cfg2 = load_dataset(tmp_path / "ds")
    assert cfg2 == cfg
    assert all(scenes_equal(a, b) for a, b in zip(scenes, back))
