import json

import numpy as np
import pytest

from inferix.engine import DenoiseSchedule, GenerationRequest, ModelConfig, build_model, generate_sequence
from inferix.errors import ConfigError, DimensionError
from inferix.metrics import (
    ChunkedVideo,
    Manifest,
    ManifestEntry,
    ScoreSeries,
    evaluate,
    load_video,
    read_frame,
    score_aesthetic,
    score_background,
    score_clarity,
    score_motion,
    score_subject,
    split_manifest,
    vde,
    write_frame,
    write_report,
)
from oracles import cosine_oracle, laplacian_variance_oracle, motion_oracle, vde_oracle


def series(values, weights=None):
    weights = weights if weights is not None else [1.0] * len(values)
    return ScoreSeries("m", list(values), list(weights))


def box_blur(frame, times=1):
    out = np.asarray(frame, dtype=np.float64)
    for _ in range(times):
        padded = np.pad(out, 1, mode="edge")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc += padded[di:di + out.shape[0], dj:dj + out.shape[1]]
        out = acc / 9.0
    return out


def checkerboard(n=16):
    idx = np.indices((n, n)).sum(axis=0)
    return np.where(idx % 2 == 0, 255, 0).astype(np.float64)


class TestVde:
    def test_constant_series_zero(self):
        assert vde(series([5, 5, 5, 5])) == 0.0

    def test_hand_arithmetic_case(self):
        assert vde(series([1.0, 1.1, 0.9])) == pytest.approx(10.0, abs=1e-12)

    def test_scale_invariance(self):
        vals = [2.0, 2.5, 1.5, 3.0]
        a = vde(series(vals))
        b = vde(series([3.7 * v for v in vals]))
        assert abs(a - b) <= 1e-9 * abs(a)

    def test_weight_rescaling_cancels(self):
        vals = [1.0, 2.0, 0.5]
        w = [0.2, 0.5, 0.3]
        assert vde(series(vals, w)) == pytest.approx(
            vde(series(vals, [10 * x for x in w])), rel=1e-12)

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            T = int(rng.integers(2, 9))
            vals = rng.uniform(0.5, 5.0, T).tolist()
            w = rng.uniform(0.1, 2.0, T).tolist()
            got = vde(series(vals, w))
            assert got == pytest.approx(vde_oracle(vals, w), rel=1e-12)
            assert got >= 0.0

    def test_zero_iff_no_drift(self):
        assert vde(series([3.0, 3.0, 3.0])) == 0.0
        assert vde(series([3.0, 3.0, 3.0001])) > 0.0

    def test_errors(self):
        with pytest.raises(ConfigError):
            vde(series([1.0]))
        with pytest.raises(ConfigError):
            vde(series([0.0, 1.0]))  # degenerate reference
        with pytest.raises(ConfigError):
            vde(series([1.0, 2.0], [1.0, -1.0]))
        with pytest.raises(ConfigError):
            vde(series([1.0, float("nan")]))


class TestScorers:
    def test_clarity_constant_zero(self):
        assert score_clarity([np.full((8, 8), 77.0)]) == 0.0

    def test_clarity_blur_reduces(self):
        sharp = checkerboard()
        assert score_clarity([sharp]) > score_clarity([box_blur(sharp, 2)])

    def test_clarity_duplicates_equal_single(self):
        f = np.random.default_rng(1).uniform(0, 255, (8, 8))
        assert score_clarity([f, f, f]) == pytest.approx(score_clarity([f]))

    def test_clarity_matches_oracle(self):
        f = np.random.default_rng(2).uniform(0, 255, (7, 9))
        assert score_clarity([f]) == pytest.approx(
            laplacian_variance_oracle(f.tolist()), rel=1e-12)

    def test_clarity_empty_chunk(self):
        with pytest.raises(ConfigError):
            score_clarity([])

    def test_motion_identical_zero(self):
        f = np.ones((4, 4))
        assert score_motion([f, f]) == 0.0

    def test_motion_uniform_step_exact(self):
        frames = [np.full((4, 4), 10.0 * i) for i in range(4)]
        assert score_motion(frames) == 10.0

    def test_motion_reversal_invariant(self):
        rng = np.random.default_rng(3)
        frames = [rng.uniform(0, 255, (6, 6)) for _ in range(5)]
        assert score_motion(frames) == pytest.approx(
            score_motion(frames[::-1]), rel=1e-12)

    def test_motion_matches_oracle(self):
        rng = np.random.default_rng(4)
        frames = [rng.integers(0, 256, (5, 5)).astype(float) for _ in range(3)]
        assert score_motion(frames) == pytest.approx(
            motion_oracle([f.tolist() for f in frames]), rel=1e-12)

    def test_motion_needs_two_frames(self):
        with pytest.raises(ConfigError):
            score_motion([np.ones((4, 4))])

    def test_aesthetic_constant_zero(self):
        assert score_aesthetic([np.full((8, 8), 42.0)]) == 0.0

    def test_aesthetic_is_mean_std(self):
        rng = np.random.default_rng(5)
        frames = [rng.uniform(0, 255, (6, 6)) for _ in range(3)]
        expected = np.mean([f.std() for f in frames])
        assert score_aesthetic(frames) == pytest.approx(expected, rel=1e-12)

    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(6)
        chunk = [rng.integers(0, 256, (16, 16)).astype(np.uint8) for _ in range(2)]
        assert score_background(chunk, chunk) == pytest.approx(1.0, abs=1e-12)
        assert score_subject(chunk, chunk) == pytest.approx(1.0, abs=1e-12)

    def test_center_perturbation_isolated(self):
        rng = np.random.default_rng(7)
        base = rng.integers(0, 256, (16, 16)).astype(np.uint8)
        perturbed = base.copy()
        perturbed[6:10, 6:10] = 255 - perturbed[6:10, 6:10]  # strictly center
        assert score_background([perturbed], [base]) == pytest.approx(1.0, abs=1e-6)
        assert score_subject([perturbed], [base]) < 1.0 - 1e-6

    def test_cosine_matches_oracle(self):
        rng = np.random.default_rng(8)
        a = [rng.integers(0, 256, (16, 16)).astype(np.uint8)]
        b = [rng.integers(0, 256, (16, 16)).astype(np.uint8)]
        from inferix.metrics import _region_histogram
        ha = _region_histogram(a, "center")
        hb = _region_histogram(b, "center")
        assert score_subject(a, b) == pytest.approx(
            cosine_oracle(ha.tolist(), hb.tolist()), rel=1e-12)


class TestEvaluate:
    def make_repeating_video(self, reps=3):
        rng = np.random.default_rng(9)
        chunk = [rng.integers(0, 256, (16, 16)).astype(np.uint8) for _ in range(3)]
        return ChunkedVideo(chunk * reps, chunk_len=3)

    def test_identical_chunks_all_zero(self):
        rep = evaluate(self.make_repeating_video())
        for name in rep.VDE_FIELDS:
            assert getattr(rep, name) == pytest.approx(0.0, abs=1e-9)

    def test_progressive_blur_clarity_monotone(self):
        rng = np.random.default_rng(10)
        base = [rng.integers(0, 256, (16, 16)).astype(np.float64) for _ in range(2)]
        vdes = []
        for strength in (1, 2, 3):
            frames = list(base)
            frames += [box_blur(f, strength) for f in base]
            vdes.append(evaluate(ChunkedVideo(frames, 2)).vde_clarity)
        assert vdes[0] < vdes[1] < vdes[2]

    def test_engine_output_evaluates(self):
        model = build_model(ModelConfig(layers=1, heads=2, head_dim=4,
                                        block_len=4, frame_shape=(16, 16),
                                        prompt_dim=8))
        blocks = generate_sequence(model, GenerationRequest(
            num_blocks=4, schedule=DenoiseSchedule(steps=[1.0, 0.5]), seed=2))
        frames = [f for b in blocks for f in b.frames]
        rep = evaluate(ChunkedVideo(frames, model.config.block_len))
        for k, v in rep.to_dict().items():
            assert np.isfinite(v), k

    def test_wmape_scheme(self):
        video = self.make_repeating_video()
        rep = evaluate(video, weight_scheme="wmape")
        for name in rep.VDE_FIELDS:
            assert getattr(rep, name) >= 0.0
        with pytest.raises(ConfigError):
            evaluate(video, weight_scheme="nope")

    def test_too_few_chunks(self):
        with pytest.raises(ConfigError):
            evaluate(ChunkedVideo([np.ones((4, 4))] * 3, chunk_len=3))

    def test_mismatched_frames(self):
        with pytest.raises(DimensionError):
            ChunkedVideo([np.ones((4, 4)), np.ones((5, 5))], 1)


def synthetic_manifest(n=1000):
    # class mix: 671 humans / 171 animals / 158 environment
    entries = []
    for i in range(n):
        if i < 671:
            cls = "humans"
        elif i < 671 + 171:
            cls = "animals"
        else:
            cls = "environment"
        entries.append(ManifestEntry(f"vid{i:04d}", f"src{i % 7}", cls,
                                     60.0 + i % 30))
    return Manifest(entries)


class TestManifest:
    def test_80_20_split_sizes(self):
        m = split_manifest(synthetic_manifest(1000), seed=0)
        counts = {"train": 0, "eval": 0}
        for e in m.entries:
            counts[e.split] += 1
        assert counts == {"train": 800, "eval": 200}

    def test_deterministic(self):
        a = split_manifest(synthetic_manifest(50), seed=3)
        b = split_manifest(synthetic_manifest(50), seed=3)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_seed_changes_assignment(self):
        a = split_manifest(synthetic_manifest(200), seed=1)
        b = split_manifest(synthetic_manifest(200), seed=2)
        assert [e.split for e in a.entries] != [e.split for e in b.entries]

    def test_class_proportions_preserved(self):
        m = split_manifest(synthetic_manifest(1000), seed=0)
        overall = {"humans": 671 / 1000, "animals": 171 / 1000,
                   "environment": 158 / 1000}
        for split in ("train", "eval"):
            part = [e for e in m.entries if e.split == split]
            for cls, frac in overall.items():
                got = sum(e.object_class == cls for e in part) / len(part)
                assert abs(got - frac) <= 0.05

    def test_too_few_entries(self):
        with pytest.raises(ConfigError):
            split_manifest(synthetic_manifest(4), seed=0)

    def test_text_round_trip(self):
        m = split_manifest(synthetic_manifest(10), seed=0)
        again = Manifest.from_text(m.to_text())
        assert again == m


class TestFiles:
    def test_frame_round_trip(self, tmp_path):
        frame = np.random.default_rng(11).integers(0, 256, (9, 13)).astype(np.uint8)
        path = tmp_path / "f.frame"
        write_frame(path, frame)
        np.testing.assert_array_equal(read_frame(path), frame)

    def test_load_video_name_order(self, tmp_path):
        for i in range(4):
            write_frame(tmp_path / f"frame_{i:05d}.frame",
                        np.full((4, 4), i, dtype=np.uint8))
        video = load_video(tmp_path, chunk_len=2)
        assert [int(f[0, 0]) for f in video.frames] == [0, 1, 2, 3]
        assert video.num_chunks == 2

    def test_truncated_frame_file(self, tmp_path):
        path = tmp_path / "bad.frame"
        path.write_bytes(b"\x04\x00\x04\x00abc")
        with pytest.raises(ConfigError):
            read_frame(path)

    def test_report_files(self, tmp_path):
        video = TestEvaluate().make_repeating_video()
        rep = evaluate(video)
        write_report(rep, tmp_path / "r.txt", tmp_path / "r.json")
        text = (tmp_path / "r.txt").read_text()
        assert "vde_clarity\t" in text
        data = json.loads((tmp_path / "r.json").read_text())
        assert set(data) == set(rep.to_dict())
