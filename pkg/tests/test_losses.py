import math

import numpy as np
import pytest

from uvface.losses import (
    LossConfig,
    bce_attention_loss,
    build_uv_edge_set,
    edge_length_loss,
    edge_lengths,
    normal_vector_loss,
    total_loss,
    weighted_position_loss,
)
from uvface.mesh import FaceMesh, facet_normals
from uvface.uvmap import UVPositionMap, WeightMask, compute_uv_mapping
from uvface.fitting import central_difference, compare_gradients, _lattice_mesh

from conftest import random_rotation


def full_mask(shape, value=1.0):
    return WeightMask(weights=np.full(shape, value), valid=np.ones(shape, bool))


def uv(grid, valid=None):
    grid = np.asarray(grid, dtype=np.float64)
    valid = np.ones(grid.shape[:2], bool) if valid is None else valid
    return UVPositionMap(grid=grid, valid=valid)


class TestWeightedPositionLoss:
    def test_zero_at_equality(self):
        rng = np.random.default_rng(0)
        grid = rng.normal(size=(4, 5, 3))
        value, grad = weighted_position_loss(uv(grid), uv(grid.copy()), full_mask((4, 5)))
        assert value == 0.0
        assert np.count_nonzero(grad) == 0

    def test_single_cell_hand_value(self):
        pred = uv(np.array([[[3.0, 4.0, 0.0]]]))
        truth = uv(np.zeros((1, 1, 3)))
        value, grad = weighted_position_loss(pred, truth, full_mask((1, 1), 2.0))
        assert value == pytest.approx(10.0)
        assert np.allclose(grad[0, 0], [1.2, 1.6, 0.0])

    def test_invalid_cells_excluded(self):
        rng = np.random.default_rng(1)
        grid = rng.normal(size=(3, 3, 3))
        valid = np.ones((3, 3), bool)
        valid[1, 1] = False
        masked = full_mask((3, 3))
        before, grad = weighted_position_loss(uv(grid, valid), uv(np.zeros((3, 3, 3)), valid), masked)
        grid2 = grid.copy()
        grid2[1, 1] += 100.0
        after, _ = weighted_position_loss(uv(grid2, valid), uv(np.zeros((3, 3, 3)), valid), masked)
        assert before == after
        assert np.count_nonzero(grad[1, 1]) == 0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        pred = rng.normal(size=(4, 6, 3))
        truth = rng.normal(size=(4, 6, 3))
        weights = rng.uniform(0.0, 2.0, size=(4, 6))
        v1, _ = weighted_position_loss(
            uv(pred), uv(truth), WeightMask(weights=weights, valid=np.ones((4, 6), bool))
        )
        perm = rng.permutation(24)
        shape = (4, 6)
        v2, _ = weighted_position_loss(
            uv(pred.reshape(24, 3)[perm].reshape(*shape, 3)),
            uv(truth.reshape(24, 3)[perm].reshape(*shape, 3)),
            WeightMask(weights=weights.reshape(24)[perm].reshape(shape), valid=np.ones(shape, bool)),
        )
        assert v1 == pytest.approx(v2, rel=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            weighted_position_loss(uv(np.zeros((2, 2, 3))), uv(np.zeros((3, 2, 3))), full_mask((2, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            truth = rng.normal(size=(3, 4, 3))
            pred = truth + rng.normal(size=(3, 4, 3))
            mask = full_mask((3, 4), 1.3)

            def value(grid):
                return weighted_position_loss(uv(grid), uv(truth), mask)[0]

            _, analytic = weighted_position_loss(uv(pred.copy()), uv(truth), mask)
            numeric = central_difference(value, pred.copy(), 1e-6)
            dist = np.linalg.norm(pred - truth, axis=2)
            active = np.broadcast_to((dist > 1e-2)[:, :, None], analytic.shape)
            assert compare_gradients(analytic, numeric, active) < 1e-5


class TestBceAttentionLoss:
    def test_perfect_prediction_hits_clamp_floor(self):
        truth = np.array([[0.0, 1.0], [1.0, 0.0]])
        value, _ = bce_attention_loss(truth.copy(), truth, clamp=1e-7)
        assert value == pytest.approx(-math.log(1.0 - 1e-7))

    def test_single_cell_log_two(self):
        value, _ = bce_attention_loss(np.array([[0.5]]), np.array([[1.0]]))
        assert value == pytest.approx(math.log(2.0))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            bce_attention_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.uniform(0.05, 0.95, size=(5, 5))
            truth = (rng.random((5, 5)) > 0.5).astype(float)

            def value(x):
                return bce_attention_loss(x, truth)[0]

            _, analytic = bce_attention_loss(a.copy(), truth)
            numeric = central_difference(value, a.copy(), 1e-6)
            active = np.ones_like(a, dtype=bool)
            assert compare_gradients(analytic, numeric, active) < 1e-5


class TestUvEdgeSet:
    def test_two_by_two_grid(self, toy_quad):
        vertices, facets = toy_quad
        mapping = compute_uv_mapping(FaceMesh(vertices=vertices, facets=facets), (2, 2))
        edges = build_uv_edge_set(mapping)
        assert len(edges) == 4
        assert {tuple(e) for e in edges} == {(0, 1), (0, 2), (1, 3), (2, 3)}

    def test_strip(self):
        n = 7
        angles = np.linspace(-0.8, 0.8, n)
        vertices = np.stack([np.sin(angles), np.zeros(n), np.cos(angles)], axis=1)
        facets = np.stack([np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=1)
        mapping = compute_uv_mapping(FaceMesh(vertices=vertices, facets=facets), (1, n))
        edges = build_uv_edge_set(mapping)
        assert len(edges) == n - 1
        assert {tuple(e) for e in edges} == {(i, i + 1) for i in range(n - 1)}

    def test_template_matches_brute_force(self, fit_assets):
        template, mapping, _, _ = fit_assets
        edges = build_uv_edge_set(mapping)
        ru = np.unique(mapping.cell_u, return_inverse=True)[1]
        rv = np.unique(mapping.cell_v, return_inverse=True)[1]
        du = np.abs(ru[:, None] - ru[None, :])
        dv = np.abs(rv[:, None] - rv[None, :])
        adjacent = (du + dv) == 1
        i, j = np.nonzero(np.triu(adjacent))
        expected = {tuple(sorted((a, b))) for a, b in zip(i.tolist(), j.tolist())}
        assert {tuple(e) for e in edges} == expected


class TestEdgeLengthLoss:
    def test_zero_at_equality(self, fit_assets):
        template, mapping, _, edges = fit_assets
        value, grad = edge_length_loss(template, template, edges)
        assert value == 0.0
        assert np.count_nonzero(grad) == 0

    def test_uniform_stretch_counts_edges(self):
        n = 6
        strip = np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], axis=1)
        edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
        value, _ = edge_length_loss(2.0 * strip, strip, edges)
        assert value == pytest.approx(len(edges))

    def test_rigid_motion_invariance(self, fit_assets):
        template, _, _, edges = fit_assets
        rng = np.random.default_rng(5)
        rot = random_rotation(rng)
        moved = template.vertices @ rot.T + rng.normal(size=3)
        value, _ = edge_length_loss(moved, template, edges)
        assert value < 1e-10 * len(edges)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            vertices, _, edges = _lattice_mesh(rng)
            truth, _, _ = _lattice_mesh(rng)
            gt_len = edge_lengths(truth, edges)

            def value(v):
                from uvface.losses import edge_length_loss_from_lengths

                return edge_length_loss_from_lengths(v, edges, gt_len)[0]

            from uvface.losses import edge_length_loss_from_lengths

            _, analytic = edge_length_loss_from_lengths(vertices, edges, gt_len)
            numeric = central_difference(value, vertices.copy(), 1e-6)
            residual = np.abs(edge_lengths(vertices, edges) - gt_len)
            active_vertex = np.ones(len(vertices), bool)
            for e in np.nonzero(residual <= 1e-2)[0]:
                active_vertex[edges[e]] = False
            active = np.broadcast_to(active_vertex[:, None], analytic.shape)
            assert compare_gradients(analytic, numeric, active) < 1e-5


class TestNormalVectorLoss:
    def test_self_normals_identically_zero(self):
        # normals recomputed from the prediction are orthogonal to its own
        # edges, so that variant of the loss is structurally zero
        rng = np.random.default_rng(7)
        for _ in range(20):
            vertices, facets, _ = _lattice_mesh(rng)
            value, _ = normal_vector_loss(vertices, facet_normals(vertices, facets), facets)
            assert value < 1e-12

    def test_flat_facet_hand_value(self):
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        facets = np.array([[0, 1, 2]])
        s = math.sin(math.pi / 4)
        normal = np.array([[s, 0.0, math.cos(math.pi / 4)]])
        value, _ = normal_vector_loss(vertices, normal, facets)
        # |<(-1,0,0),n>| + |<(1,-1,0)/sqrt2,n>| + |<(0,1,0),n>|
        assert value == pytest.approx(s + s / math.sqrt(2.0))

    def test_prediction_equal_truth_zero(self, fit_assets):
        template, _, _, _ = fit_assets
        value, _ = normal_vector_loss(
            template, facet_normals(template), template.facets
        )
        assert value < 1e-12

    def test_degenerate_edge_rejected(self):
        vertices = np.array([[0.0, 0, 0], [0, 0, 0], [0, 1, 0]])
        # repeated position (not index) collapses one edge
        facets = np.array([[0, 1, 2]])
        with pytest.raises(ValueError, match="degenerate"):
            normal_vector_loss(vertices, np.array([[0.0, 0, 1]]), facets)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            vertices, facets, _ = _lattice_mesh(rng)
            truth, _, _ = _lattice_mesh(rng)
            gt_normals = facet_normals(truth, facets)

            def value(v):
                return normal_vector_loss(v, gt_normals, facets)[0]

            _, analytic = normal_vector_loss(vertices, gt_normals, facets)
            numeric = central_difference(value, vertices.copy(), 1e-6)
            active_vertex = np.ones(len(vertices), bool)
            for a, b in ((0, 1), (1, 2), (2, 0)):
                vec = vertices[facets[:, a]] - vertices[facets[:, b]]
                inner = np.abs((vec * gt_normals).sum(axis=1)) / np.linalg.norm(vec, axis=1)
                for t in np.nonzero(inner <= 1e-2)[0]:
                    active_vertex[facets[t]] = False
            active = np.broadcast_to(active_vertex[:, None], analytic.shape)
            assert compare_gradients(analytic, numeric, active) < 1e-5


class TestPositivity:
    def test_losses_positive_away_from_truth(self, fit_assets):
        # every term is a sum of norms / absolute values: nonzero residual
        # means strictly positive loss
        template, mapping, mask, edges = fit_assets
        rng = np.random.default_rng(10)
        truth = template.vertices
        pred = truth + rng.normal(scale=0.05, size=truth.shape)
        from uvface.uvmap import encode_uv_map

        v_pos, _ = weighted_position_loss(
            encode_uv_map(pred, mapping), encode_uv_map(truth, mapping), mask
        )
        v_edge, _ = edge_length_loss(pred, truth, edges)
        v_norm, _ = normal_vector_loss(pred, facet_normals(truth, template.facets),
                                       template.facets)
        v_bce, _ = bce_attention_loss(np.full((4, 4), 0.5), np.ones((4, 4)))
        assert v_pos > 0 and v_edge > 0 and v_norm > 0 and v_bce > 0


class TestTotalLoss:
    def test_default_betas_sum(self):
        values = {name: 1.0 for name in ("L_G", "L_D", "L_P", "L_A", "L_E", "L_V")}
        report = total_loss(values, LossConfig())
        assert report.total == pytest.approx(2.75)

    def test_zero_betas(self):
        cfg = LossConfig(beta_g=0, beta_d=0, beta_p=0, beta_a=0, beta_e=0, beta_v=0)
        assert total_loss({}, cfg).total == 0.0

    def test_random_dot_product(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            betas = rng.uniform(0, 2, size=6)
            values = dict(zip(("L_G", "L_D", "L_P", "L_A", "L_E", "L_V"), rng.normal(size=6)))
            cfg = LossConfig(*betas)
            expected = float(np.dot(betas, [values[k] for k in ("L_G", "L_D", "L_P", "L_A", "L_E", "L_V")]))
            assert total_loss(values, cfg).total == pytest.approx(expected, rel=1e-12)

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError):
            total_loss({"L_G": 1.0}, LossConfig(beta_g=-0.1, beta_d=0, beta_p=0,
                                                beta_a=0, beta_e=0, beta_v=0))

    def test_missing_term_with_weight_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            total_loss({"L_G": 1.0}, LossConfig())

    def test_gradients_scaled_by_beta(self):
        grads = {"L_G": np.ones((2, 2))}
        cfg = LossConfig(beta_d=0, beta_p=0, beta_a=0, beta_e=0, beta_v=0)
        report = total_loss({"L_G": 2.0}, cfg, gradients=grads)
        assert np.allclose(report.gradients["L_G"], 0.1)

    def test_text_serialization(self):
        values = {"L_G": 1.25, "L_E": 0.5}
        cfg = LossConfig(beta_d=0, beta_p=0, beta_a=0, beta_v=0)
        text = total_loss(values, cfg).to_text()
        lines = text.strip().splitlines()
        assert lines[0] == "L_G 1.25"
        assert lines[-1].startswith("total ")
        total = float(lines[-1].split()[1])
        assert total == pytest.approx(0.1 * 1.25 + 1.0 * 0.5)

    def test_clamp_validation(self):
        with pytest.raises(ValueError):
            LossConfig(bce_clamp=0.5)
