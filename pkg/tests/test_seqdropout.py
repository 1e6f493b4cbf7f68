import itertools

import numpy as np
import pytest

from conftest import make_study
from dropseg.errors import AllCensored
from dropseg.seqdropout import (
    CensorMask,
    DropoutPolicy,
    all_masks,
    censor,
    inference_mask,
    rescale_factor,
    sample_mask,
)
from dropseg.volgrid import MultiSequenceStudy, SequenceId, assemble_input


@pytest.mark.parametrize("c, expected", [(1, 4 / 3), (2, 2.0), (0, 1.0), (3, 4.0)])
def test_rescale_factor(c, expected):
    assert rescale_factor(4, c) == expected


def test_rescale_all_censored():
    with pytest.raises(AllCensored):
        rescale_factor(4, 4)


def test_mask_string_format():
    m = CensorMask.of([SequenceId.PostGdIR])
    assert m.to_string() == "1101"
    assert CensorMask.parse("1101") == m
    assert m.n_censored == 1


def test_fifteen_admissible_masks():
    masks = all_masks()
    assert len(masks) == 15
    assert len({m.to_string() for m in masks}) == 15
    assert "0000" not in {m.to_string() for m in masks}


class TestCensor:
    def test_post_gd_ir_censored_on_ones(self):
        x = np.ones((4, 4, 20))
        out = censor(x, CensorMask.of([SequenceId.PostGdIR]))
        assert np.all(out[:, :, 10:15] == 0)
        keep = np.r_[0:10, 15:20]
        assert np.all(out[:, :, keep] == 4 / 3)

    def test_empty_mask_identity(self, rng):
        x = rng.normal(size=(5, 5, 20))
        out = censor(x, CensorMask())
        assert out.tobytes() == x.tobytes()

    def test_all_censored_rejected(self):
        with pytest.raises(AllCensored):
            censor(np.ones((2, 2, 20)), CensorMask((True,) * 4))

    def test_sum_preserved_equal_block_sums(self, rng):
        for _ in range(70):  # 1050 censored tensors
            x = rng.random((6, 6, 20))
            for q in range(4):
                blk = x[:, :, 5 * q : 5 * q + 5]
                blk *= 10.0 / blk.sum()
            total = x.sum()
            for m in all_masks():
                assert censor(x, m).sum() == pytest.approx(total, rel=1e-5)

    def test_composition_with_assemble(self):
        full = make_study(seed=3)
        kept = {q: v for q, v in full.volumes.items() if q != SequenceId.PostGdIR}
        absent = MultiSequenceStudy(full.case_id, kept, full.gt)
        for z in (0, 4, 9):
            a = censor(assemble_input(absent, z), inference_mask(absent))
            f = assemble_input(full, z)
            f[:, :, 10:15] = 0
            b = censor(f, CensorMask.of([SequenceId.PostGdIR]))
            np.testing.assert_allclose(a, b, atol=1e-6)


class TestSampling:
    def test_point_policy(self, rng):
        p = DropoutPolicy.point(CensorMask())
        assert all(sample_mask(rng, p) == CensorMask() for _ in range(100))

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(2024)
        p = DropoutPolicy.uniform()
        counts = {}
        for _ in range(15000):
            k = sample_mask(rng, p).to_string()
            counts[k] = counts.get(k, 0) + 1
        assert len(counts) == 15
        # +-5 sigma of Binomial(15000, 1/15) is about +-150
        assert all(abs(c - 1000) <= 150 for c in counts.values())

    def test_deterministic(self):
        p = DropoutPolicy.uniform()
        a = [sample_mask(np.random.default_rng(7), p) for _ in range(1)]
        r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
        assert [sample_mask(r1, p) for _ in range(200)] == [sample_mask(r2, p) for _ in range(200)]
        assert a

    def test_policy_rejects_all_censored(self):
        with pytest.raises(AllCensored):
            DropoutPolicy((CensorMask((True,) * 4),), (1.0,))

    def test_policy_probabilities_sum_to_one(self):
        with pytest.raises(ValueError):
            DropoutPolicy((CensorMask(),), (0.5,))


class TestInferenceMask:
    def test_missing_post_gd_ir(self):
        s = make_study(seqs=(SequenceId.PreGdT1, SequenceId.PostGdT1, SequenceId.Flair))
        m = inference_mask(s)
        assert m.censored == (False, False, True, False)
        assert m.n_censored == 1

    def test_full_study(self):
        assert inference_mask(make_study()) == CensorMask()

    def test_flair_only(self):
        m = inference_mask(make_study(seqs=(SequenceId.Flair,)))
        assert m.censored == (True, True, True, False)
        assert rescale_factor(4, m.n_censored) == 4


def test_mask_product_is_exhaustive():
    got = {m.censored for m in all_masks()}
    want = {f for f in itertools.product((False, True), repeat=4) if not all(f)}
    assert got == want
