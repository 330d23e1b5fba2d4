"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -v -s tests/test_acceptance.py``)."""

import os
import time

import numpy as np

from uvface import fitting
from uvface.align import LandmarkCorrespondence, estimate_similarity, self_align
from uvface.cli import main
from uvface.fitting import FitConfig, PoseRanges, _lattice_mesh, fit_sample, synth_dataset
from uvface.losses import normal_vector_loss
from uvface.mesh import facet_normals
from uvface.metrics import gimbal_fix_filter, mae_pose, nme_bbox
from uvface.pose import PoseTransform, apply_pose
from uvface.uvmap import decode_uv_map, encode_uv_map

from conftest import random_rotation


def report(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    assert ok, f"{name}: {detail}"


def rotation_angle(r_a, r_b):
    cos = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def test_criterion_similarity_recovery(template64):
    k_s = template64.landmarks()
    rng = np.random.default_rng(2024)
    worst_r = worst_f = worst_t = 0.0
    start = time.perf_counter()
    for _ in range(1000):
        rot = random_rotation(rng)
        scale = rng.uniform(0.2, 5.0)
        t = rng.uniform(-10.0, 10.0, 3)
        k_p = scale * k_s @ rot.T + t
        pose = estimate_similarity(LandmarkCorrespondence(k_s, k_p, np.full(68, 1.1)))
        worst_r = max(worst_r, float(np.linalg.norm(pose.rotation - rot)))
        worst_f = max(worst_f, abs(pose.scale - scale) / scale)
        worst_t = max(worst_t, float(np.linalg.norm(pose.translation - t)))
    elapsed = time.perf_counter() - start
    ok = worst_r < 1e-8 and worst_f < 1e-10 and worst_t < 1e-8 and elapsed < 5.0
    report("similarity recovery (1000 trials)", ok,
           f"R {worst_r:.2e} f {worst_f:.2e} t {worst_t:.2e} in {elapsed:.2f}s")


def test_criterion_reflection_safety(template64):
    k_s = template64.landmarks()
    rng = np.random.default_rng(4045)
    worst = 0.0
    for trial in range(1000):
        k_p = k_s @ random_rotation(rng).T * rng.uniform(0.2, 5.0) + rng.uniform(-5, 5, 3)
        if trial % 2 == 0:
            k_p[:, 0] = -k_p[:, 0]  # mirrored set
        pose = estimate_similarity(LandmarkCorrespondence(k_s, k_p, np.ones(68)))
        worst = max(worst, abs(float(np.linalg.det(pose.rotation)) - 1.0))
    report("reflection safety (1000 trials incl. mirrors)", worst < 1e-10,
           f"max |det - 1| = {worst:.2e}")


def test_criterion_visibility_robustness(template64):
    size = template64.bbox_diagonal()
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        pose = PoseTransform(rng.uniform(0.5, 2.0), random_rotation(rng), rng.normal(size=3))
        posed = apply_pose(template64, pose)
        corrupted = posed.vertices.copy()
        bad = rng.choice(68, size=10, replace=False)
        noise = rng.normal(size=(10, 3))
        noise *= 0.5 * size * pose.scale / np.linalg.norm(noise, axis=1, keepdims=True)
        corrupted[template64.landmark_indices[bad]] += noise
        posed_bad = posed.with_vertices(corrupted)
        vis = np.ones(68)
        vis[bad] = 0.0
        weighted = self_align(posed_bad, template64, vis)
        uniform = self_align(posed_bad, template64, np.ones(68))
        if rotation_angle(weighted.rotation, pose.rotation) < rotation_angle(
            uniform.rotation, pose.rotation
        ):
            wins += 1
    report("visibility robustness (weighted wins)", wins >= 95, f"{wins}/100 seeds")


def test_criterion_gradient_suite():
    start = time.perf_counter()
    checks = fitting.check_gradients(seed=7, points=100)
    elapsed = time.perf_counter() - start
    worst = max(c.max_rel_error for c in checks)
    ok = len(checks) == 5 and worst < 1e-5 and elapsed < 30.0
    detail = " ".join(f"{c.term}={c.max_rel_error:.1e}" for c in checks)
    report("gradient suite (5 terms x 100 points)", ok, f"{detail} in {elapsed:.1f}s")


def test_criterion_self_normal_identity():
    rng = np.random.default_rng(31337)
    worst = 0.0
    for _ in range(100):
        vertices, facets, _ = _lattice_mesh(rng)
        value, _ = normal_vector_loss(vertices, facet_normals(vertices, facets), facets)
        worst = max(worst, value)
    report("prediction-derived normal loss vanishes (100 meshes)", worst < 1e-12,
           f"max value = {worst:.2e}")


def test_criterion_uv_roundtrip(template64, mapping256):
    rng = np.random.default_rng(55)
    exact = np.array_equal(
        decode_uv_map(encode_uv_map(template64.vertices, mapping256), mapping256),
        template64.vertices,
    )
    for _ in range(100):
        positions = template64.vertices + rng.normal(scale=0.1, size=(4096, 3))
        decoded = decode_uv_map(encode_uv_map(positions, mapping256), mapping256)
        exact = exact and np.array_equal(decoded, positions)
    report("UV round trip bit-exact at 256x256 (template + 100 deformations)", exact)


def test_criterion_metric_oracles():
    nme = nme_bbox(np.array([[0.0, 0], [4, 9]]), np.array([[0.0, 0], [4, 4]]))
    ok_nme = nme == 0.625

    per_axis, mean = mae_pose([[3.0, 6.0, 9.0]], [[0.0, 0.0, 0.0]])
    ok_mae = mean == 6.0 and np.array_equal(per_axis, [3, 6, 9])

    errors = np.array([
        [2.0, 25.0, 3.0],    # drop
        [10.0, 25.0, 30.0],  # keep
        [2.0, 5.0, 5.0],     # keep
        [4.0, 19.0, 21.0],   # drop
        [5.0, 30.0, 0.0],    # keep
        [0.0, 20.0, 20.0],   # keep
    ])
    retained, dropped = gimbal_fix_filter(errors)
    ok_filter = dropped.tolist() == [0, 3] and retained.tolist() == [1, 2, 4, 5]

    reported = mae_pose([[2.93, 4.43, 2.95]], [[0.0, 0.0, 0.0]])[1]
    ok_mean3 = abs(reported - 3.44) < 0.005

    ok = ok_nme and ok_mae and ok_filter and ok_mean3
    report("metric oracles", ok,
           f"nme={nme} mae={mean} filter={dropped.tolist()} mean3={reported:.4f}")


def test_criterion_end_to_end_fit(fit_assets):
    template, mapping, mask, edges = fit_assets
    samples = synth_dataset(
        seed=77, count=20, pose_ranges=PoseRanges(yaw=(-80.0, 80.0)),
        template=template, mapping=mapping,
    )
    start = time.perf_counter()
    worst = 0.0
    for sample in samples:
        result = fit_sample(sample.posed_mesh, sample.landmark_visibility,
                            FitConfig(), template, mapping, mask, edges)
        rebuilt = (result.pose.scale
                   * (template.vertices + result.deformation) @ result.pose.rotation.T
                   + result.pose.translation)
        err = np.linalg.norm(rebuilt - sample.posed_mesh.vertices, axis=1).mean()
        # normalize by the template diagonal carried into the target frame
        worst = max(worst, err / (sample.pose.scale * template.bbox_diagonal()))
    elapsed = time.perf_counter() - start
    ok = worst < 0.01 and elapsed < 60.0
    report("end-to-end fit (20 samples)", ok,
           f"worst dense error {worst:.3%} in {elapsed:.1f}s")


def test_criterion_cli_determinism(tmp_path):
    def file_map(directory):
        out = {}
        for root, _, files in os.walk(directory):
            for name in files:
                path = os.path.join(root, name)
                with open(path, "rb") as fh:
                    out[os.path.relpath(path, directory)] = fh.read()
        return out

    def run_all(base):
        os.makedirs(base)
        template = os.path.join(base, "template.obj")
        assert main(["template", "--rows", "32", "--cols", "32", "--out", template]) == 0
        assert main(["synth", "--out", os.path.join(base, "synth"), "--seed", "13",
                     "--count", "2", "--density", "32", "--resolution", "48",
                     "--mask-size", "64", "--occluders", "1", "2"]) == 0
        assert main(["fit", "--sample", os.path.join(base, "synth", "sample_000"),
                     "--out", os.path.join(base, "fit"), "--iterations", "10"]) == 0
        uvpm = os.path.join(base, "map.uvpm")
        assert main(["uv", "encode", "--mesh", template, "--out", uvpm,
                     "--rows", "32", "--cols", "32", "--height", "96",
                     "--width", "96"]) == 0
        assert main(["uv", "decode", "--map", uvpm, "--out",
                     os.path.join(base, "decoded.obj"), "--rows", "32",
                     "--cols", "32"]) == 0
        vis = os.path.join(base, "vis.txt")
        with open(vis, "w") as fh:
            fh.write("1.0\n" * 68)
        assert main(["align", template, template, vis, "--out",
                     os.path.join(base, "pose.txt")]) == 0
        pred = os.path.join(base, "pred.txt")
        gt = os.path.join(base, "gt.txt")
        with open(pred, "w") as fh:
            fh.write("0 0\n4 9\n")
        with open(gt, "w") as fh:
            fh.write("0 0\n4 4\n")
        assert main(["eval", "--pred", pred, "--gt", gt, "--seed", "3",
                     "--out", os.path.join(base, "report.txt")]) == 0
        return file_map(base)

    first = run_all(os.path.join(tmp_path, "run1"))
    second = run_all(os.path.join(tmp_path, "run2"))
    same = set(first) == set(second) and all(first[k] == second[k] for k in first)
    differing = [k for k in first if first.get(k) != second.get(k)]
    report("seeded CLI subcommands bit-identical", same, f"differing: {differing}")
