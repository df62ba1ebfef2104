"""Generator reproducibility and predicate ground truth."""

import numpy as np
import pytest

from pancan import synth
from pancan.grids import GridSpec


class TestReproducibility:
    def test_same_seed_identical_bytes(self):
        grid = GridSpec.cells(4, 5)
        a = synth.make_synth(7, 40, grid)
        b = synth.make_synth(7, 40, grid)
        for split in ("train", "val", "test"):
            sa, sb = a.split(split), b.split(split)
            assert sa.features.tobytes() == sb.features.tobytes()
            assert sa.labels.tobytes() == sb.labels.tobytes()

    def test_different_seed_differs(self):
        grid = GridSpec.cells(4, 5)
        a = synth.make_synth(1, 30, grid)
        b = synth.make_synth(2, 30, grid)
        assert a.train.features.tobytes() != b.train.features.tobytes()

    def test_split_sizes(self):
        ds = synth.make_synth(0, 100, GridSpec.cells(4, 4),
                              split=(0.7, 0.1, 0.2))
        assert ds.train.n_samples == 70
        assert ds.val.n_samples == 10
        assert ds.test.n_samples == 20


class TestPredicates:
    def test_labels_match_direct_predicate_evaluation(self):
        ds = synth.make_synth(3, 60, GridSpec.cells(8, 10))
        for split in ("train", "val", "test"):
            s = ds.split(split)
            for i in range(s.n_samples):
                want = synth.evaluate_predicates(s.motifs[i], ds.n_labels)
                np.testing.assert_array_equal(s.labels[i], want)

    def test_near_pair_positive(self):
        g = np.zeros((4, 4), dtype=np.int8)
        g[0, 0] = synth.MOTIF_A
        g[0, 2] = synth.MOTIF_B  # Manhattan distance two
        assert synth.evaluate_predicates(g, 4)[0] == 1
        g[0, 2] = 0
        g[3, 3] = synth.MOTIF_B
        assert synth.evaluate_predicates(g, 4)[0] == -1

    def test_cluster_positive_requires_three_in_macro(self):
        g = np.zeros((4, 4), dtype=np.int8)
        g[0, 0] = g[0, 1] = g[1, 0] = synth.MOTIF_C
        assert synth.evaluate_predicates(g, 4)[1] == 1
        g[1, 0] = 0
        g[3, 3] = synth.MOTIF_C
        assert synth.evaluate_predicates(g, 4)[1] == -1

    def test_presence_label(self):
        g = np.zeros((3, 3), dtype=np.int8)
        assert synth.evaluate_predicates(g, 4)[2] == -1
        g[1, 1] = synth.MOTIF_D
        assert synth.evaluate_predicates(g, 4)[2] == 1

    def test_second_ring_pair_label(self):
        g = np.zeros((4, 4), dtype=np.int8)
        g[0, 0] = synth.MOTIF_E
        g[0, 2] = synth.MOTIF_F
        assert synth.evaluate_predicates(g, 4)[3] == 1
        g[0, 2] = 0
        g[3, 3] = synth.MOTIF_F
        assert synth.evaluate_predicates(g, 4)[3] == -1


class TestConstruction:
    def test_every_label_reasonably_balanced(self):
        ds = synth.make_synth(5, 300, GridSpec.cells(8, 10))
        for s in (ds.train, ds.val, ds.test):
            rate = (s.labels == 1).mean(axis=0)
            assert (rate >= 0.05).all() and (rate <= 0.95).all()

    def test_context_labels_count_matched(self):
        # positives and negatives of the pair label carry the same motif counts
        ds = synth.make_synth(6, 200, GridSpec.cells(8, 10))
        m = ds.train.motifs
        y = ds.train.labels[:, 0]
        n_ab, n_e = synth._pair_budget(80)
        a_counts = (m == synth.MOTIF_A).sum(axis=(1, 2))
        b_counts = (m == synth.MOTIF_B).sum(axis=(1, 2))
        e_counts = (m == synth.MOTIF_E).sum(axis=(1, 2))
        f_counts = (m == synth.MOTIF_F).sum(axis=(1, 2))
        assert set(a_counts) == {n_ab}
        assert set(b_counts) == {n_ab}
        assert set(e_counts) == {n_e}
        assert set(f_counts) == {n_e}
        assert (y == 1).any() and (y == -1).any()

    def test_zero_noise_features_are_prototypes(self):
        ds = synth.make_synth(8, 25, GridSpec.cells(4, 4), noise=0.0)
        bank = synth.prototype_bank(4)
        s = ds.train
        for i in range(s.n_samples):
            flat = s.motifs[i].reshape(-1)
            np.testing.assert_array_equal(s.features[i], bank[:, flat])

    def test_bad_split_rejected(self):
        with pytest.raises(Exception):
            synth.make_synth(0, 10, GridSpec.cells(2, 2), split=(0.5, 0.1, 0.1))
