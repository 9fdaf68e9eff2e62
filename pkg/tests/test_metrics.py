import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semfuse.errors import EmptyText, ShapeMismatch
from semfuse.imagedata import ColorSpace, ImageTensor
from semfuse.metrics import (
    MetricReport,
    ag,
    char_entropy,
    default_lexicon,
    evaluate,
    load_lexicon,
    ms_ssim,
    ms_ssim_fusion,
    normalize_report,
    qabf,
    report_stats,
    sd,
    sf,
    to_u8,
)


def u8(seed, shape=(16, 16)):
    return np.random.default_rng(seed).integers(0, 256, shape)


def edgy(seed, shape=(32, 32)):
    rng = np.random.default_rng(seed)
    img = np.zeros(shape)
    for _ in range(4):
        r0, c0 = rng.integers(0, shape[0] - 4), rng.integers(0, shape[1] - 4)
        img[r0:r0 + rng.integers(3, 12), c0:c0 + rng.integers(3, 12)] = rng.integers(60, 256)
    return np.clip(img + rng.integers(0, 20, shape), 0, 255).astype(np.int64)


class TestQuantize:
    def test_float_and_image(self):
        y = np.array([[0.0, 0.5, 1.0]] * 8 + [[0.002, 0.998, 0.25]])
        np.testing.assert_array_equal(to_u8(y)[0], [0, 128, 255])
        img = ImageTensor(np.random.default_rng(0).random((8, 8)))
        np.testing.assert_array_equal(to_u8(img), np.round(255 * img.pixels[..., 0]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            to_u8(np.full((8, 8), 3.0))
        with pytest.raises(ValueError):
            to_u8(np.full((8, 8), 300))

    def test_rgb_uses_luminance(self):
        px = np.zeros((8, 8, 3))
        px[..., 0] = 1.0
        assert to_u8(ImageTensor(px, colorspace=ColorSpace.RGB))[0, 0] == round(255 * 0.299)


class TestSd:
    def test_examples(self):
        assert sd(np.full((8, 8), 77)) == 0.0
        assert sd(np.array([[0, 0], [255, 255]])) == 127.5

    def test_shift_and_permutation(self):
        u = u8(1)
        assert sd(u // 2 + 10) == pytest.approx(sd(u // 2), rel=1e-12)
        perm = np.random.default_rng(2).permutation(u.ravel()).reshape(u.shape)
        assert sd(perm) == pytest.approx(sd(u), rel=1e-12)


class TestSf:
    def test_examples(self):
        assert sf(np.full((8, 8), 5)) == 0.0
        board = (np.indices((8, 8)).sum(0) % 2) * 255
        assert sf(board) == pytest.approx(255 * math.sqrt(2), rel=1e-12)

    def test_horizontal_stripes(self):
        stripes = np.repeat((np.arange(8) % 2 * 255)[:, None], 8, axis=1)
        assert sf(stripes) == pytest.approx(255.0)
        assert sf(stripes.T) == pytest.approx(255.0)


class TestAg:
    def test_examples(self):
        assert ag(np.full((8, 8), 9)) == 0.0
        ramp = np.tile(np.arange(10), (8, 1))
        assert ag(ramp) == pytest.approx(0.25, rel=1e-15)
        assert ag(ramp.T) == pytest.approx(0.25, rel=1e-15)

    def test_rms_form(self):
        ramp = np.tile(np.arange(10), (8, 1))
        assert ag(ramp, form="rms") == pytest.approx(math.sqrt(0.5))
        with pytest.raises(ValueError):
            ag(ramp, form="other")


@pytest.mark.parametrize("seed", range(20))
def test_sf_ag_sd_match_loop_oracles(seed):
    u = u8(seed)
    for fn, ref in ((sf, oracles.sf), (ag, oracles.ag), (sd, oracles.sd)):
        want = ref(u.tolist())
        assert abs(fn(u) - want) <= 1e-10 * abs(want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flip_invariance(seed):
    u = u8(seed, (12, 9))
    for flipped in (u[::-1], u[:, ::-1]):
        assert sf(flipped) == pytest.approx(sf(u), rel=1e-12)
        assert sd(flipped) == pytest.approx(sd(u), rel=1e-12)
    # forward differences anchor each term at the top-left corner, so the
    # printed AG is only invariant under transposition
    assert ag(u.T) == pytest.approx(ag(u), rel=1e-12)


class TestQabf:
    def test_flat_inputs_zero(self):
        flat = np.full((16, 16), 100)
        assert qabf(flat, flat, np.random.default_rng(0).integers(0, 256, (16, 16))) == 0.0

    def test_range_on_random_triples(self):
        for seed in range(50):
            v = qabf(u8(3 * seed), u8(3 * seed + 1), u8(3 * seed + 2))
            assert 0.0 <= v <= 1.0

    def test_symmetric_in_sources(self):
        a, b, f = u8(1), u8(2), u8(3)
        assert qabf(a, b, f) == pytest.approx(qabf(b, a, f), abs=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_loop_oracle(self, seed):
        a, b, f = edgy(seed, (16, 16)), edgy(seed + 10, (16, 16)), edgy(seed + 20, (16, 16))
        assert abs(qabf(a, b, f) - oracles.qabf(a.tolist(), b.tolist(), f.tolist())) <= 1e-9
        assert abs(qabf(a, a, a) - oracles.qabf(a.tolist(), a.tolist(), a.tolist())) <= 1e-9

    def test_perfect_transfer_near_max(self):
        a = edgy(4)
        assert qabf(a, a, a) == pytest.approx(0.9994 * 0.9879 / (1 + math.exp(-15 * 0.5)) /
                                              (1 + math.exp(-22 * 0.2)), rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            qabf(u8(0), u8(1), u8(2, (16, 15)))


class TestMsSsim:
    def test_identity(self):
        x = u8(0, (32, 32))
        assert ms_ssim_fusion(x, x, x) == pytest.approx(2.0, abs=1e-6)

    def test_symmetric(self):
        for seed in range(5):
            x = edgy(seed)
            y = np.clip(x // 2 + edgy(seed + 50) // 2, 0, 255)
            assert ms_ssim(x, y) > 0
            assert abs(ms_ssim(x, y) - ms_ssim(y, x)) <= 1e-9

    def test_independent_noise_clamps_to_zero(self):
        assert ms_ssim(u8(1, (32, 32)), u8(2, (32, 32))) == 0.0

    def test_fusion_symmetric_exactly(self):
        a, b, f = u8(1, (32, 32)), u8(2, (32, 32)), u8(3, (32, 32))
        assert ms_ssim_fusion(a, b, f) == ms_ssim_fusion(b, a, f)

    @pytest.mark.parametrize("seed", range(2))
    def test_loop_oracle(self, seed):
        a, b, f = edgy(seed), edgy(seed + 5), edgy(seed + 9)
        want = oracles.ms_ssim(f.tolist(), a.tolist()) + oracles.ms_ssim(f.tolist(), b.tolist())
        assert abs(ms_ssim_fusion(a, b, f) - want) <= 1e-6

    def test_range(self):
        for seed in range(5):
            v = ms_ssim_fusion(u8(seed, (16, 16)), u8(seed + 1, (16, 16)), u8(seed + 2, (16, 16)))
            assert 0.0 <= v <= 2.0

    def test_too_small(self):
        with pytest.raises(ShapeMismatch):
            ms_ssim(u8(0, (8, 8)), u8(1, (8, 8)))


def test_evaluate_report():
    a, b = edgy(1), edgy(2)
    rep = evaluate(a, b, a, image_id="p1")
    assert isinstance(rep, MetricReport)
    assert rep.computed_on == "p1"
    assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    row = rep.row()
    assert row[0] == "p1" and all(len(c.split(".")[1]) == 6 for c in row[1:])


class TestReportStats:
    ROW1 = ("Defect in the posterior fossa which is an abnormality in the optic nerve sheath, a rare "
            "congenital condition where there are ependymomas found, as well as an area of increased "
            "radiotracer uptake on the surface of the brain, indicating a possible abnormality or pathology.")

    def test_trivial_entropies(self):
        assert report_stats("aaaa").word_length == 1
        assert report_stats("aaaa").entropy_bits_per_char == 0.0
        assert report_stats("ab").entropy_bits_per_char == 1.0

    def test_reference_row(self):
        stats = report_stats(self.ROW1)
        assert abs(stats.word_length - 44) <= 3
        assert abs(stats.entropy_bits_per_char - 4.013) <= 0.05

    def test_raw_mode(self):
        raw = report_stats("A, a.", normalize=False).entropy_bits_per_char
        assert raw == pytest.approx(char_entropy("A, a."))
        assert report_stats("A, a.").entropy_bits_per_char == pytest.approx(char_entropy("a a"))

    def test_normalize(self):
        assert normalize_report("  The  Brain, (left)  lobe. ") == "the brain left lobe"

    def test_keywords_case_insensitive(self):
        stats = report_stats("Mass in the CEREBELLUM near the pons", ["cerebellum", "pons", "thalamus"])
        assert stats.keyword_hits == ["cerebellum", "pons"]

    def test_default_lexicon(self):
        lex = default_lexicon()
        assert "cerebellum" in lex and all(not t.startswith("#") for t in lex)
        assert "posterior fossa" in report_stats(self.ROW1).keyword_hits

    def test_load_lexicon(self, tmp_path):
        p = tmp_path / "lex.txt"
        p.write_text("# comment\nbrain\n\n  pons  \n")
        assert load_lexicon(p) == ["brain", "pons"]

    def test_empty(self):
        with pytest.raises(EmptyText):
            report_stats("   ")
        with pytest.raises(EmptyText):
            char_entropy("")

    def test_row(self):
        assert report_stats("ab", ["a", "b"]).row("r1") == ["r1", "1", "1.000000", "a;b"]

    @settings(max_examples=50, deadline=None)
    @given(st.text(min_size=1, max_size=60))
    def test_entropy_bound(self, text):
        h = char_entropy(text)
        assert 0.0 <= h <= math.log2(len(set(text))) + 1e-12
