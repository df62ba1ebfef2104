"""Anchor selection, NMS separation, and macro-cell fusion."""

import math

import numpy as np
import pytest

from pancan import crossscale as cs
from pancan import numeric as nm
from pancan.errors import ConfigError
from pancan.grids import CellFeatures, GridSpec
from pancan.numeric import Mat


def grids_8x10():
    return GridSpec.cells(8, 10), GridSpec.cells(4, 5)


class TestMacroMap:
    def test_every_micro_covered_nonempty(self):
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        seen = np.zeros(fine.n_cells, dtype=int)
        for cells in mmap.members:
            assert cells.size > 0
            seen[cells] += 1
        assert np.all(seen >= 1)
        assert np.all(seen == 1)  # stride == window: exact partition

    def test_border_clipping(self):
        fine = GridSpec.cells(3, 3)
        coarse = GridSpec.cells(2, 2)
        mmap = cs.build_macro_map(fine, coarse)
        sizes = sorted(c.size for c in mmap.members)
        assert sizes == [1, 2, 2, 4]

    def test_mismatched_grids_rejected(self):
        with pytest.raises(ConfigError):
            cs.build_macro_map(GridSpec.cells(8, 10), GridSpec.cells(3, 5))


class TestSaliency:
    def test_zero_column(self):
        cf = CellFeatures(0, GridSpec.cells(1, 2), np.array([[0.0, 3.0], [0.0, 4.0]]))
        np.testing.assert_allclose(cs.saliency(cf), [0.0, 5.0])

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((4, 6))
        want = [math.sqrt(sum(feats[i, j] ** 2 for i in range(4))) for j in range(6)]
        np.testing.assert_allclose(cs.saliency(feats), want, atol=1e-12)


class TestSelectAnchors:
    def test_radius_zero_is_argmax_per_macro(self):
        fine, coarse = GridSpec.cells(4, 4), GridSpec.cells(2, 2)
        mmap = cs.build_macro_map(fine, coarse)
        rng = np.random.default_rng(1)
        sal = rng.random(fine.n_cells)
        anchors = cs.select_anchors(sal, mmap, nms_radius=0)
        for macro, cells in enumerate(mmap.members):
            assert anchors[macro] == cells[np.argmax(sal[cells])]

    def test_nms_pushes_second_macro_to_next_best(self):
        # two adjacent macro-cells whose peaks sit on the shared border
        fine, coarse = GridSpec.cells(2, 4), GridSpec.cells(1, 2)
        mmap = cs.build_macro_map(fine, coarse)
        sal = np.array([0.1, 1.0, 0.9, 0.5,
                        0.1, 0.1, 0.2, 0.1])
        anchors = cs.select_anchors(sal, mmap, nms_radius=1)
        # macro 0 takes cell 1 (best overall); macro 1's peak at cell 2 sits
        # within radius 1 of it, so the next admissible member, cell 3, wins
        assert anchors[0] == 1
        assert anchors[1] == 3

    def test_equal_saliency_tie_break_lowest_index(self):
        fine, coarse = GridSpec.cells(4, 4), GridSpec.cells(2, 2)
        mmap = cs.build_macro_map(fine, coarse)
        anchors = cs.select_anchors(np.ones(16), mmap, nms_radius=0)
        for macro, cells in enumerate(mmap.members):
            assert anchors[macro] == cells.min()

    def test_scaling_invariance(self):
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        rng = np.random.default_rng(2)
        sal = rng.random(fine.n_cells)
        a1 = cs.select_anchors(sal, mmap, 1)
        a2 = cs.select_anchors(sal * 37.5, mmap, 1)
        np.testing.assert_array_equal(a1, a2)

    def test_nms_separation_invariant(self):
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        rng = np.random.default_rng(3)
        for _ in range(10):
            sal = rng.random(fine.n_cells)
            anchors = cs.select_anchors(sal, mmap, nms_radius=1)
            raw = [cells[np.argmax(sal[cells])] for cells in mmap.members]
            for i in range(len(anchors)):
                for j in range(i + 1, len(anchors)):
                    dist = max(abs(fine.cell_coords(anchors[i])[0]
                                   - fine.cell_coords(anchors[j])[0]),
                               abs(fine.cell_coords(anchors[i])[1]
                                   - fine.cell_coords(anchors[j])[1]))
                    # separation holds unless one side is a documented fallback
                    if anchors[i] != raw[i] or anchors[j] != raw[j]:
                        continue
                    if dist <= 1:
                        # both kept their argmax; the later one must have been
                        # chosen first in saliency order, so check the fallback
                        assert sal[mmap.members[i]].max() != sal[mmap.members[j]].max() or dist > 1


class TestFuseMacro:
    def make_params(self, rng, d=4, out=3):
        return cs.init_cscamn_params(rng, d, out)

    def test_single_member_macro(self):
        rng = np.random.default_rng(4)
        p = self.make_params(rng)
        feats = rng.standard_normal((4, 3))
        out = cs.fuse_macro(2, np.array([2]), feats, p)
        anchor = feats[:, 2]
        cat = np.concatenate([p.w_v.data @ anchor, anchor])
        want = np.maximum(p.proj_w.data @ cat + p.proj_b.data[:, 0], 0.0)
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_identical_members_uniform_attention(self):
        rng = np.random.default_rng(5)
        p = self.make_params(rng)
        col = rng.standard_normal(4)
        feats = np.tile(col[:, None], (1, 4))
        out = cs.fuse_macro(0, np.arange(4), feats, p)
        cat = np.concatenate([p.w_v.data @ col, col])
        want = np.maximum(p.proj_w.data @ cat + p.proj_b.data[:, 0], 0.0)
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_anchor_must_be_member(self):
        rng = np.random.default_rng(6)
        p = self.make_params(rng)
        with pytest.raises(ConfigError):
            cs.fuse_macro(5, np.array([0, 1]), rng.standard_normal((4, 6)), p)

    def test_batched_matches_reference_oracle(self):
        rng = np.random.default_rng(7)
        fine, coarse = GridSpec.cells(2, 2), GridSpec.cells(1, 1)
        mmap = cs.build_macro_map(fine, coarse)
        p = self.make_params(rng, d=4, out=3)
        feats = rng.standard_normal((4, 4))
        out = cs.cscamn_module(CellFeatures(0, fine, feats), mmap, p)
        sal = cs.saliency(feats)
        anchor = cs.select_anchors(sal, mmap, p.nms_radius)[0]
        want = cs.fuse_macro(anchor, mmap.members[0], feats, p)
        np.testing.assert_allclose(out.feats[:, 0], want, atol=1e-12)


class TestModule:
    def test_8x10_to_4x5_shape(self):
        rng = np.random.default_rng(8)
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        p = cs.init_cscamn_params(rng, 6, 9)
        cf = CellFeatures(0, fine, rng.standard_normal((6, 80)))
        out = cs.cscamn_module(cf, mmap, p)
        assert out.feats.shape == (9, 20)
        assert (out.grid.n_rows, out.grid.n_cols) == (4, 5)

    def test_1x2_to_1x1_shape(self):
        rng = np.random.default_rng(9)
        mmap = cs.build_macro_map(GridSpec.cells(1, 2), GridSpec.cells(1, 1))
        p = cs.init_cscamn_params(rng, 5, 4)
        cf = CellFeatures(0, GridSpec.cells(1, 2), rng.standard_normal((5, 2)))
        assert cs.cscamn_module(cf, mmap, p).feats.shape == (4, 1)

    def test_constant_input_constant_output(self):
        rng = np.random.default_rng(10)
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        p = cs.init_cscamn_params(rng, 5, 4)
        col = rng.standard_normal(5)
        cf = CellFeatures(0, fine, np.tile(col[:, None], (1, 80)))
        out = cs.cscamn_module(cf, mmap, p).feats
        for j in range(1, out.shape[1]):
            np.testing.assert_allclose(out[:, j], out[:, 0], atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        fine, coarse = grids_8x10()
        mmap = cs.build_macro_map(fine, coarse)
        p = cs.init_cscamn_params(rng, 5, 4)
        rec = {}
        cs.cscamn_batched(Mat(rng.standard_normal((5, 160))), mmap, p,
                          recorder=rec, key="t")
        probs = rec["t"]["probs"]
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_gradients_through_fusion(self):
        rng = np.random.default_rng(12)
        fine, coarse = GridSpec.cells(2, 2), GridSpec.cells(1, 1)
        mmap = cs.build_macro_map(fine, coarse)
        p = cs.init_cscamn_params(rng, 3, 3)
        feats = rng.standard_normal((3, 8))  # two samples

        def f(leaves):
            probe = cs.CscamnParams(leaves[0], leaves[1], leaves[2],
                                    leaves[3], leaves[4], p.nms_radius)
            out = cs.cscamn_batched(Mat(feats), mmap, probe)
            return nm.sum_all(nm.hadamard(out, out))

        leaves = [p.w_q, p.w_m, p.w_v, p.proj_w, p.proj_b]
        assert nm.grad_check(f, leaves, eps=1e-5) <= 1e-4
