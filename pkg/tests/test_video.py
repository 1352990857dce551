import numpy as np
import pytest

from repnerv.tensor import Tensor
from repnerv.video import (
    Video,
    adjacent_frame_mad,
    read_frames,
    read_ppm,
    synth_video,
    write_frame,
    write_frames,
)


def test_write_read_black_frame(tmp_path):
    frame = Tensor(np.zeros((1, 3, 4, 6), np.float32))
    write_frame(frame, tmp_path / "frame_00000.ppm")
    video = read_frames(tmp_path)
    assert len(video) == 1
    np.testing.assert_array_equal(video.frames[0].data, frame.data)


def test_byte_value_mapping(tmp_path):
    vals = np.array([0.0, 1.0, 0.5], np.float32)
    frame = Tensor(np.tile(vals.reshape(3, 1, 1), (1, 2, 2))[None])
    p = tmp_path / "frame_00000.ppm"
    write_frame(frame, p)
    arr = read_ppm(p)
    assert arr[0, 0, 0] == 0
    assert arr[0, 0, 1] == 255
    assert arr[0, 0, 2] == 128  # round half up


def test_roundtrip_exact_at_8bit(tmp_path):
    rng = np.random.default_rng(0)
    quantized = np.round(rng.uniform(0, 1, size=(1, 3, 8, 8)) * 255) / 255.0
    video = Video([Tensor(quantized.astype(np.float32))])
    write_frames(video, tmp_path)
    back = read_frames(tmp_path)
    np.testing.assert_allclose(back.frames[0].data, quantized, atol=1e-7)


def test_frames_sorted_lexicographically(tmp_path):
    for i, v in ((1, 0.25), (0, 0.0), (2, 0.75)):
        frame = Tensor(np.full((1, 3, 2, 2), v, np.float32))
        write_frame(frame, tmp_path / f"frame_{i:05d}.ppm")
    video = read_frames(tmp_path)
    got = [float(f.data[0, 0, 0, 0]) for f in video.frames]
    assert got == sorted(got)


def test_read_rejects_empty_dir(tmp_path):
    with pytest.raises(ValueError):
        read_frames(tmp_path)


def test_read_rejects_mixed_sizes(tmp_path):
    write_frame(Tensor(np.zeros((1, 3, 2, 2), np.float32)), tmp_path / "frame_00000.ppm")
    write_frame(Tensor(np.zeros((1, 3, 4, 4), np.float32)), tmp_path / "frame_00001.ppm")
    with pytest.raises(ValueError):
        read_frames(tmp_path)


def test_read_rejects_malformed(tmp_path):
    (tmp_path / "frame_00000.ppm").write_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        read_frames(tmp_path)
    (tmp_path / "frame_00000.ppm").write_bytes(b"P6\n2 2\n255\n\x00")
    with pytest.raises(ValueError):
        read_frames(tmp_path)


def test_ppm_header_comments_allowed(tmp_path):
    p = tmp_path / "frame_00000.ppm"
    p.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
    arr = read_ppm(p)
    assert arr.shape == (1, 2, 3)


def test_write_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        write_frame(Tensor(np.full((1, 3, 2, 2), 1.5, np.float32)), tmp_path / "x.ppm")


# ---------------------------------------------------------------------------
# synthetic videos


@pytest.mark.parametrize("kind", ["moving_gradient", "bouncing_square", "color_noise_smooth"])
def test_synth_deterministic(kind):
    a = synth_video(kind, 4, 16, 24, seed=7)
    b = synth_video(kind, 4, 16, 24, seed=7)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.data, fb.data)
    c = synth_video(kind, 4, 16, 24, seed=8)
    assert any(
        not np.array_equal(fa.data, fc.data) for fa, fc in zip(a.frames, c.frames)
    )


@pytest.mark.parametrize("kind", ["moving_gradient", "bouncing_square", "color_noise_smooth"])
def test_synth_range_and_coherence(kind):
    video = synth_video(kind, 16, 32, 64, seed=0)
    assert len(video) == 16 and video.size == (32, 64)
    for f in video.frames:
        assert f.data.min() >= 0.0 and f.data.max() <= 1.0
    assert adjacent_frame_mad(video) < 0.2


def test_bouncing_square_has_exactly_one_square():
    video = synth_video("bouncing_square", 8, 32, 32, seed=3)
    for f in video.frames:
        plane = f.data[0, 0]
        values = np.unique(plane)
        assert values.size == 2  # background + one constant-color square
        square = plane == values[1] if (plane == values[1]).sum() < plane.size / 2 else plane == values[0]
        ys, xs = np.where(square)
        assert (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1) == square.sum()


def test_synth_rejects_bad_kind():
    with pytest.raises(ValueError):
        synth_video("lava_lamp", 4, 8, 8, seed=0)


def test_video_requires_uniform_shapes():
    with pytest.raises(ValueError):
        Video([
            Tensor(np.zeros((1, 3, 4, 4), np.float32)),
            Tensor(np.zeros((1, 3, 8, 8), np.float32)),
        ])
