import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disdiff.errors import InvalidInputError
from disdiff.evaluation import ToyDetector, ToyEmbedder, evaluate, fdfr, ism
from disdiff.imageio import read_image
from fixtures import embed_oracle, eval_fixture, luma_variance_oracle


class FixedDetector:
    def __init__(self, answers):
        self.answers = dict(answers)

    def detect(self, image):
        return self.answers[float(np.asarray(image).ravel()[0])]


class VectorEmbedder:
    """Treats the image itself as an embedding (tests only)."""

    def embed(self, image):
        v = np.asarray(image, dtype=np.float64).ravel()
        return v / np.linalg.norm(v)


def tagged(values):
    return [np.array([v, 1.0]) for v in values]


class TestFdfr:
    def test_all_detected(self):
        assert fdfr(tagged([1, 2]), FixedDetector({1: True, 2: True})) == 0.0

    def test_none_detected(self):
        assert fdfr(tagged([1, 2]), FixedDetector({1: False, 2: False})) == 1.0

    def test_three_of_four(self):
        det = FixedDetector({1: True, 2: True, 3: True, 4: False})
        assert fdfr(tagged([1, 2, 3, 4]), det) == 0.25

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            fdfr([], ToyDetector())


class TestIsm:
    def test_self_match(self):
        img = [np.array([0.3, 0.4, 0.5])]
        assert ism(img * 3, img, VectorEmbedder()) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert ism([np.array([0.0, 1.0])], [np.array([1.0, 0.0])], VectorEmbedder()) == 0.0

    def test_mean_of_two(self):
        # similarities 0.2 and 0.6 against the reference axis e1
        a = np.array([0.2, np.sqrt(1 - 0.04)])
        b = np.array([0.6, 0.8])
        assert ism([a, b], [np.array([1.0, 0.0])], VectorEmbedder()) == pytest.approx(0.4, abs=1e-12)

    def test_reference_is_renormalized_mean(self):
        clean = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        assert ism([np.array([1.0, 1.0])], clean, VectorEmbedder()) == pytest.approx(1.0, abs=1e-12)

    def test_undetected_excluded(self):
        det = FixedDetector({1.0: True, 0.0: False})
        imgs = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        assert ism(imgs, [np.array([1.0, 0.0])], VectorEmbedder(), det) == pytest.approx(1.0)

    def test_none_detected_is_undefined(self):
        det = FixedDetector({0.0: False})
        assert ism([np.array([0.0, 1.0])], [np.array([1.0, 0.0])], VectorEmbedder(), det) is None

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100))
    def test_scale_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        gen, clean = list(rng.uniform(0.1, 1, (3, 4))), list(rng.uniform(0.1, 1, (2, 4)))

        class Scaled(VectorEmbedder):
            def embed(self, image):
                return k * super().embed(image)

        assert ism(gen, clean, Scaled()) == pytest.approx(ism(gen, clean, VectorEmbedder()), abs=1e-12)


class TestToyModels:
    def test_embedder_unit_norm_and_oracle(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        v = ToyEmbedder().embed(img)
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(v, embed_oracle(img), atol=1e-14)

    def test_embedder_rejects_black(self):
        with pytest.raises(InvalidInputError):
            ToyEmbedder().embed(np.zeros((8, 8, 3)))

    def test_detector_matches_variance_oracle(self):
        rng = np.random.default_rng(2)
        det = ToyDetector()
        for _ in range(20):
            img = rng.uniform(size=(8, 8, 3)) * rng.uniform(0, 0.3)
            assert det.detect(img) == (luma_variance_oracle(img) > det.tau)


class TestEvaluate:
    def test_hand_counted_fixture(self, tmp_path):
        gen, clean = eval_fixture(tmp_path)
        report = evaluate(gen, clean, ToyDetector(), ToyEmbedder())
        assert report.n == 8 and report.n_detected == 5
        assert report.fdfr == 3 / 8
        assert [r.detected for r in report.rows] == [True] * 5 + [False] * 3
        assert report.fdfr + report.n_detected / report.n == 1.0

        ref = np.mean([embed_oracle(read_image(p)) for p in sorted(clean.iterdir())], axis=0)
        ref = ref / np.linalg.norm(ref)
        sims = [float(np.dot(embed_oracle(read_image(gen / f"img_{i:02d}.png")), ref)) for i in range(5)]
        assert report.ism == pytest.approx(np.mean(sims), abs=1e-12)

    def test_clean_vs_clean(self, tmp_path):
        gen, _ = eval_fixture(tmp_path)
        only = tmp_path / "single"
        only.mkdir()
        (only / "a.png").write_bytes((gen / "img_00.png").read_bytes())
        report = evaluate(only, only, ToyDetector(), ToyEmbedder())
        assert report.ism == pytest.approx(1.0, abs=1e-6)

    def test_outputs_are_deterministic(self, tmp_path):
        gen, clean = eval_fixture(tmp_path)
        blobs = []
        for k in range(2):
            r = evaluate(gen, clean, ToyDetector(), ToyEmbedder())
            r.write_csv(tmp_path / f"{k}.csv")
            r.write_json(tmp_path / f"{k}.json")
            blobs.append(((tmp_path / f"{k}.csv").read_bytes(), (tmp_path / f"{k}.json").read_bytes()))
        assert blobs[0] == blobs[1]
        with (tmp_path / "0.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image", "detected", "similarity"]
        assert rows[6] == ["img_05.png", "false", ""]
        doc = json.loads((tmp_path / "0.json").read_text())
        assert {"fdfr", "ism", "n"} <= set(doc)

    def test_unreadable_listed_not_counted(self, tmp_path):
        gen, clean = eval_fixture(tmp_path)
        (gen / "zz_broken.png").write_bytes(b"not a png")
        report = evaluate(gen, clean, ToyDetector(), ToyEmbedder())
        assert report.unreadable == ["zz_broken.png"]
        assert report.n == 8 and report.fdfr == 3 / 8

    def test_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        _, clean = eval_fixture(tmp_path / "x")
        with pytest.raises(InvalidInputError):
            evaluate(tmp_path / "empty", clean, ToyDetector(), ToyEmbedder())

    def test_no_faces_gives_undefined_ism(self, tmp_path):
        gen, clean = eval_fixture(tmp_path)
        report = evaluate(gen, clean, ToyDetector(tau=10.0), ToyEmbedder())
        assert report.fdfr == 1.0 and report.ism is None
