import numpy as np
import pytest

from corrflow.encoder import EncoderConfig, init_params
from corrflow.experiments import davis_identity, held_out_clips, illumination_jitter, propagation_benchmark
from corrflow.synthetic import SyntheticSpec


def _write_palette_png(path, ids):
    Image = pytest.importorskip("PIL.Image")
    im = Image.fromarray(ids.astype(np.uint8), mode="P")
    im.putpalette([0, 0, 0, 128, 0, 0, 0, 128, 0] + [0] * 759)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


def test_davis_identity_on_a_hand_built_tree(tmp_path):
    # one sequence, one object moving 2 px right per frame over 3 frames
    (tmp_path / "ImageSets/2017").mkdir(parents=True)
    (tmp_path / "ImageSets/2017/val.txt").write_text("toy\n")
    for t in range(3):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:6, 2 + 2 * t : 6 + 2 * t] = 1
        _write_palette_png(tmp_path / f"Annotations/480p/toy/{t:05d}.png", m)
    s = davis_identity(tmp_path)
    # frame 1 overlaps 8 of 24 pixels, frame 2 overlaps 0 of 32
    assert s.j_mean == pytest.approx((8 / 24 + 0.0) / 2)


def test_jitter_is_per_frame_and_in_range():
    clip = held_out_clips(1, SyntheticSpec(clip_length=3))[0]
    out = illumination_jitter(clip.frames, 0.1, seed=0)
    assert out.min() >= 0 and out.max() <= 1 and out.dtype == np.float32
    ratios = [float(np.median(o / np.maximum(f, 1e-3))) for o, f in zip(out, clip.frames)]
    assert len(set(np.round(ratios, 4))) == 3
    np.testing.assert_array_equal(illumination_jitter(clip.frames, 0.1, seed=0), out)


def test_benchmark_rows_are_bounded():
    params = init_params(EncoderConfig.preset("tiny"))
    res = propagation_benchmark(params, held_out_clips(2, SyntheticSpec(clip_length=3)), M=2)
    assert len(res.per_clip) == 2
    assert all(0 <= v <= 1 for row in res.per_clip for v in row)
    assert res.identity == pytest.approx(np.mean([r[1] for r in res.per_clip]))
