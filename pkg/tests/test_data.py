import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from malipnet import data as D
from malipnet.seq2seq import EOS, N_RESERVED, PAD


def small_spec(**kw):
    base = dict(vocab_size=6, n_samples=12, height=8, width=16, seed=3)
    base.update(kw)
    return D.SynthSpec(**base)


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class TestSynthSpec:
    @pytest.mark.parametrize(
        "kw",
        [dict(vocab_size=3), dict(frames_per_token=1), dict(height=4), dict(width=0), dict(min_tokens=3, max_tokens=2)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_spec(**kw)

    def test_from_mapping_types(self):
        spec = D.SynthSpec.from_mapping({"vocab_size": "6", "noise_sigma": "0.1"})
        assert spec.vocab_size == 6 and spec.noise_sigma == 0.1

    def test_from_mapping_unknown_key(self):
        with pytest.raises(KeyError):
            D.SynthSpec.from_mapping({"colour": "1"})


class TestGenerate:
    def test_token_shapes_distinct(self):
        for V in (4, 6, 8, 20):
            shapes = {D.token_shape(t, V) for t in range(N_RESERVED, V)}
            assert len(shapes) == V - N_RESERVED
            assert D.SILENCE_SHAPE not in shapes

    def test_layout(self):
        spec = small_spec()
        for frames, label in D.generate(spec):
            n_tok = len(label) - 1
            assert frames.shape == (n_tok * spec.frames_per_token + 2 * spec.silence_frames, 8, 16)
            assert frames.dtype == np.float32

    def test_pixel_range_and_labels(self):
        for frames, label in D.generate(small_spec(noise_sigma=0.5)):
            assert frames.min() >= 0.0 and frames.max() <= 1.0
            assert label[-1] == EOS
            assert np.all(label[:-1] >= N_RESERVED)

    def test_noiseless_repeat_segments_identical(self):
        spec = small_spec(noise_sigma=0.0, n_samples=200)
        F, s = spec.frames_per_token, spec.silence_frames
        found = False
        for frames, label in D.generate(spec):
            toks = list(label[:-1])
            for i in range(len(toks)):
                for j in range(i + 1, len(toks)):
                    if toks[i] == toks[j]:
                        a = frames[s + i * F : s + (i + 1) * F]
                        b = frames[s + j * F : s + (j + 1) * F]
                        np.testing.assert_array_equal(a, b)
                        found = True
        assert found

    def test_silence_frames_are_neutral(self):
        spec = small_spec(noise_sigma=0.0)
        frames, _ = D.generate_sample(spec, 0)
        silence = D.render(D.SILENCE_SHAPE, 8, 16)
        np.testing.assert_array_equal(frames[0], silence)
        np.testing.assert_array_equal(frames[-1], silence)

    def test_samples_independent_of_count(self):
        a = D.generate(small_spec(n_samples=5))
        b = D.generate(small_spec(n_samples=9))
        for (fa, la), (fb, lb) in zip(a, b):
            np.testing.assert_array_equal(fa, fb)
            np.testing.assert_array_equal(la, lb)

    def test_seed_changes_data(self):
        a = D.generate_sample(small_spec(seed=1), 0)[0]
        b = D.generate_sample(small_spec(seed=2), 0)[0]
        assert a.shape != b.shape or not np.array_equal(a, b)

    def test_probe_separates_tokens(self):
        """Logistic regression on per-segment mean frames recovers the token."""
        spec = D.SynthSpec(vocab_size=6, n_samples=500, seed=11)
        X, y = [], []
        F, s = spec.frames_per_token, spec.silence_frames
        for frames, label in D.generate(spec):
            for i, tok in enumerate(label[:-1]):
                X.append(frames[s + i * F : s + (i + 1) * F].mean(axis=0).ravel())
                y.append(int(tok))
        X, y = np.array(X), np.array(y)
        cut = int(0.8 * len(y))
        probe = LogisticRegression(max_iter=2000).fit(X[:cut], y[:cut])
        assert probe.score(X[cut:], y[cut:]) > 0.95


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = small_spec(noise_sigma=0.2)
        samples = D.generate(spec)
        path = tmp_path / "d.bin"
        D.write(path, samples, spec.vocab_size)
        loaded, vocab = D.load_all(path)
        assert vocab == 6 and len(loaded) == len(samples)
        for (fa, la), (fb, lb) in zip(samples, loaded):
            assert fa.tobytes() == fb.tobytes()
            np.testing.assert_array_equal(la, lb)

    def test_fixed_seed_byte_identical(self, tmp_path):
        spec = small_spec()
        D.write(tmp_path / "a.bin", D.generate(spec), 6)
        D.write(tmp_path / "b.bin", D.generate(spec), 6)
        assert file_digest(tmp_path / "a.bin") == file_digest(tmp_path / "b.bin")

    def test_header_layout(self, tmp_path):
        D.write(tmp_path / "d.bin", D.generate(small_spec(n_samples=2)), 6)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:8] == b"MALPDATA"
        assert np.frombuffer(raw[8:20], "<u4").tolist() == [1, 2, 6]

    def test_empty_file_is_magic_error(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(D.DatasetError, match="magic"):
            D.load_all(path)

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "d.bin"
        D.write(path, D.generate(small_spec(n_samples=2)), 6)
        raw = path.read_bytes()
        path.write_bytes(raw[:40])
        with pytest.raises(D.DatasetError, match=r"truncated frames at byte 32"):
            list(D.load(path))

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "d.bin"
        D.write(path, D.generate(small_spec(n_samples=2)), 6)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(D.DatasetError, match="trailing"):
            list(D.load(path))

    def test_bad_version(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"MALPDATA" + np.array([9, 0, 6], "<u4").tobytes())
        with pytest.raises(D.DatasetError, match="version"):
            list(D.load(path))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_split_stable_and_total(self, index):
        assert D.split_of(index) == D.split_of(index)
        assert D.split_of(index) in ("train", "val", "test")

    def test_split_proportions(self):
        counts = {k: len(D.split_indices(5000, k)) for k in ("train", "val", "test")}
        assert sum(counts.values()) == 5000
        assert abs(counts["train"] / 5000 - 0.8) < 0.03
        assert abs(counts["val"] / 5000 - 0.1) < 0.02


class TestCollate:
    def test_pads_to_batch_max(self):
        a = (np.full((4, 8, 8), 0.5, np.float32), np.array([3, EOS]))
        b = (np.full((7, 8, 8), 0.25, np.float32), np.array([3, 4, 5, EOS]))
        batch = D.collate([a, b])
        assert batch.clip.shape == (2, 3, 7, 8, 8)
        assert np.all(batch.clip[0, :, 4:] == 0.0)
        assert np.all(batch.clip[0, :, :4] == 0.5)
        assert np.all(batch.clip[1] == 0.25)
        np.testing.assert_array_equal(batch.frame_mask, [[1, 1, 1, 1, 0, 0, 0], [1] * 7])
        np.testing.assert_array_equal(batch.targets, [[3, EOS, PAD, PAD], [3, 4, 5, EOS]])

    def test_mismatched_extents(self):
        a = (np.zeros((4, 8, 8), np.float32), np.array([EOS]))
        b = (np.zeros((4, 8, 9), np.float32), np.array([EOS]))
        with pytest.raises(D.DatasetError):
            D.collate([a, b])

    def test_speech_mask(self):
        np.testing.assert_array_equal(D.speech_mask(10, 2, 3), [0, 0, 1, 1, 1, 1, 1, 1, 0, 0])

    def test_strip_label(self):
        assert D.strip_label([3, 4, EOS, PAD]) == [3, 4]
        assert D.strip_label([PAD, 5]) == [5]
