"""Synthetic scene generation and its config file format."""

import math

import numpy as np
import pytest

from hcrnet.errors import InputError, ParseError
from hcrnet.rasters import NODATA
from hcrnet.synthetic import (ClassSpec, SceneSpec, default_scene_spec,
                              format_scene_config, parse_scene_config,
                              sample_sparse_labels, synthesize_scene)


def _spec(**overrides):
    kwargs = dict(timesteps=4, channels=2, height=40, width=50,
                  noise_sigma=0.2, blob_scale=4.0,
                  classes=[ClassSpec("a", 0.5, offset=0.0),
                           ClassSpec("b", 0.3, offset=2.0),
                           ClassSpec("c", 0.2, offset=4.0)])
    kwargs.update(overrides)
    return SceneSpec(**kwargs)


def test_scene_shapes_and_dtypes(tiny_scene):
    cube, labels = tiny_scene
    assert cube.shape == (5, 2, 36, 36)
    assert cube.dtype == np.float32
    assert labels.shape == (36, 36)
    assert labels.dtype == np.uint16
    assert (labels != NODATA).all()


def test_scene_is_seed_deterministic():
    spec = _spec()
    c1, l1 = synthesize_scene(spec, seed=3)
    c2, l2 = synthesize_scene(spec, seed=3)
    c3, l3 = synthesize_scene(spec, seed=4)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(l1, l2)
    assert (c1 != c3).any() and (l1 != l3).any()


def test_label_areas_match_priors_exactly():
    spec = _spec()
    _, labels = synthesize_scene(spec, seed=0)
    counts = np.bincount(labels.reshape(-1), minlength=3)
    total = labels.size
    # rank thresholding apportions pixels by largest remainder, so counts
    # deviate from the exact products by at most one pixel
    for cid, prior in enumerate(spec.priors()):
        assert abs(counts[cid] - prior * total) < 1.0


def test_labels_are_spatially_coherent():
    _, labels = synthesize_scene(_spec(noise_sigma=0.0), seed=1)
    same_right = labels[:, :-1] == labels[:, 1:]
    same_down = labels[:-1, :] == labels[1:, :]
    agree = 0.5 * (same_right.mean() + same_down.mean())
    assert agree > 0.9  # blobs, not salt-and-pepper


def test_noise_free_cube_matches_signature_table():
    spec = _spec(noise_sigma=0.0)
    cube, labels = synthesize_scene(spec, seed=2)
    lut = spec.signatures().astype(np.float32)
    t, c = 2, 1
    for cid in range(3):
        rr, cc = np.nonzero(labels == cid)
        np.testing.assert_allclose(cube[t, c, rr[0], cc[0]], lut[cid, t, c],
                                   rtol=1e-6)


def test_noise_magnitude_tracks_sigma():
    spec = _spec(noise_sigma=0.7)
    cube, labels = synthesize_scene(spec, seed=5)
    lut = spec.signatures().astype(np.float32)
    residual = cube - lut[labels.astype(np.int64)].transpose(2, 3, 0, 1)
    assert residual.std() == pytest.approx(0.7, rel=0.05)


def test_config_roundtrip():
    spec = _spec()
    text = format_scene_config(spec)
    back = parse_scene_config(text)
    assert back.timesteps == spec.timesteps
    assert back.noise_sigma == spec.noise_sigma
    assert [c.name for c in back.classes] == ["a", "b", "c"]
    for orig, parsed in zip(spec.classes, back.classes):
        assert parsed.prior == orig.prior
        assert parsed.offset == orig.offset
        assert parsed.pattern_freq == orig.pattern_freq
    # the rendered scene is identical through the config roundtrip
    c1, l1 = synthesize_scene(spec, seed=0)
    c2, l2 = synthesize_scene(back, seed=0)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(l1, l2)


def test_parse_errors():
    with pytest.raises(ParseError, match="scene"):
        parse_scene_config("[class.0]\nname = a\nprior = 1.0\n")
    with pytest.raises(ParseError, match="unknown"):
        parse_scene_config("[scene]\nbogus = 1\n")
    with pytest.raises(ParseError, match="non-numeric"):
        parse_scene_config("[scene]\ntimesteps = twelve\n")
    with pytest.raises(ParseError, match="contiguous"):
        parse_scene_config("[scene]\n\n[class.1]\nname = a\nprior = 1.0\n")
    with pytest.raises(ParseError, match="missing the prior"):
        parse_scene_config("[scene]\n\n[class.0]\nname = a\n")
    with pytest.raises(ParseError) as exc:
        parse_scene_config("no header at all\n")
    assert exc.value.line == 1


def test_validate_rejects_bad_specs():
    with pytest.raises(InputError, match="sum to 1"):
        _spec(classes=[ClassSpec("a", 0.7), ClassSpec("b", 0.7)]).validate()
    with pytest.raises(InputError, match="duplicate"):
        _spec(classes=[ClassSpec("a", 0.5), ClassSpec("a", 0.5)]).validate()
    with pytest.raises(InputError, match="no classes"):
        SceneSpec(classes=[]).validate()
    with pytest.raises(InputError, match="noise_sigma"):
        _spec(noise_sigma=-1.0).validate()
    with pytest.raises(InputError, match="positive integer"):
        _spec(height=0).validate()


def test_default_scene_spec_follows_taxonomy(tiny_taxonomy):
    priors = {"oak": 0.4, "pine": 0.3, "lake": 0.2, "river": 0.1}
    spec = default_scene_spec(tiny_taxonomy, priors, timesteps=6, channels=3,
                              height=50, width=50, macro_gap=2.0)
    assert [c.name for c in spec.classes] == ["oak", "pine", "lake", "river"]
    assert [c.prior for c in spec.classes] == [0.4, 0.3, 0.2, 0.1]
    # same macro group, same offset; different groups separated by the gap
    assert spec.classes[0].offset == spec.classes[1].offset == 0.0
    assert spec.classes[2].offset == spec.classes[3].offset == 2.0
    # siblings are split by pattern phase instead
    assert spec.classes[0].pattern_phase == 0.0
    assert spec.classes[1].pattern_phase == pytest.approx(math.pi)
    with pytest.raises(InputError, match="missing"):
        default_scene_spec(tiny_taxonomy, {"oak": 1.0})
    with pytest.raises(InputError, match="expected 4 priors"):
        default_scene_spec(tiny_taxonomy, [0.5, 0.5])


def test_default_scene_signatures_separate_macro_groups(tiny_taxonomy):
    spec = default_scene_spec(tiny_taxonomy, [0.25, 0.25, 0.25, 0.25],
                              timesteps=8, channels=4)
    lut = spec.signatures()
    macro_of = tiny_taxonomy.parent_map("micro", "macro")
    gaps = []
    for i in range(4):
        for j in range(i + 1, 4):
            dist = np.abs(lut[i] - lut[j]).mean()
            gaps.append((macro_of[i] == macro_of[j], dist))
    within = [d for same, d in gaps if same]
    across = [d for same, d in gaps if not same]
    assert max(within) < min(across)


def test_sample_sparse_labels():
    labels = np.repeat(np.arange(3, dtype=np.uint16), [100, 50, 2]).reshape(8, 19)
    sparse = sample_sparse_labels(labels, per_class=10, seed=0)
    assert sparse.shape == labels.shape
    kept = sparse != NODATA
    # kept pixels keep their original label
    np.testing.assert_array_equal(sparse[kept], labels[kept])
    counts = np.bincount(sparse[kept].astype(np.int64), minlength=3)
    assert counts[0] == 10 and counts[1] == 10
    assert counts[2] == 2  # rare class exhausts its pixels
    with pytest.raises(InputError, match="per_class"):
        sample_sparse_labels(labels, per_class=0, seed=0)


def test_sample_sparse_labels_ignores_existing_nodata():
    labels = np.full((4, 4), NODATA, dtype=np.uint16)
    labels[0, :2] = 1
    sparse = sample_sparse_labels(labels, per_class=8, seed=1)
    assert (sparse[labels == NODATA] == NODATA).all()
    assert (sparse != NODATA).sum() == 2
