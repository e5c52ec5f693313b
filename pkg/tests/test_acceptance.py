"""Acceptance criteria 1-10.

Each test prints one ``[PASS]`` / ``[FAIL]`` line with the measured numbers
(run ``pytest -s`` to see them inline; they are also kept in the captured
output of failures).
"""

import itertools
import json
import time

import numpy as np
import pytest

from keyhole.cli import main as cli_main
from keyhole.evaluation import (
    DisambiguationSearch,
    disambiguated_ssim,
    ssim,
    transform_image,
)
from keyhole.experiment import DESK_GAIN, ExperimentSpec, run_experiment
from keyhole.forward import (
    AlbedoGrid,
    FalloffModel,
    ForwardModel,
    GridGeometry,
    RigidTransform,
    adjoint,
    assemble_system,
    render,
)
from keyhole.glyphs import glyph
from keyhole.io import write_pgm
from keyhole.reconstruction import (
    EMConfig,
    annealing_schedule,
    e_step,
    em_reconstruct,
    gd_gradient,
    gd_objective,
    initial_state,
    laplacian,
    m_step,
    posterior_from_residuals,
    q_gradient,
    q_value,
)
from keyhole.simulator import (
    apply_poisson_snr,
    make_trajectory,
    preset_trajectory,
    rasterize_object,
    shift_albedo,
    simulate_sequence,
    stack_histograms,
)


def _in_window_setup(rng, shape, n_bins):
    """Random pose plus a bin width / t0 that keep every pixel inside the histogram."""
    pitch = rng.uniform(0.005, 0.05)
    geom = GridGeometry(shape, pitch, (0.0, 0.0, 0.0))
    pose = RigidTransform((rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.8, 1.5)))
    r = np.linalg.norm(pose.apply(geom.pixel_centers()), axis=1)
    c = 299_792_458.0
    span = 2 * (r.max() - r.min()) / c
    bin_width = max(span, 1e-13) / (n_bins - 4)
    t0 = 2 * r.min() / c - 1.5 * bin_width
    return geom, pose, bin_width, t0


# -- 1 --------------------------------------------------------------------------------

def test_ac1_adjoint_identity(report):
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        n_bins = int(rng.integers(8, 65))
        geom, pose, bw, t0 = _in_window_setup(rng, shape, n_bins)
        falloff = FalloffModel.preset(rng.choice(["diffuse", "retro", "experimental", "supplement"]))
        system = assemble_system(geom, pose, falloff, n_bins, bw, t0)
        rho = rng.random(shape)
        y = rng.standard_normal(n_bins)
        lhs = float(render(system, rho).counts @ y)
        rhs = float(np.sum(rho * adjoint(system, y)))
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1.0))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-9 and elapsed < 5
    report(1, "adjoint identity", ok, f"max relative gap {worst:.2e} over 100 instances", elapsed)
    assert ok


# -- 2 --------------------------------------------------------------------------------

def _central_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _gradient_instance(rng):
    shape = (5, 5)
    n_bins = 48
    geom = GridGeometry(shape, rng.uniform(0.01, 0.05), (0.0, 0.0, 0.0))
    poses = [RigidTransform((rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 1.0 + rng.uniform(0, 0.05)))
             for _ in range(3)]
    # time window spanning all three poses with a margin of a few bins
    r = np.concatenate([np.linalg.norm(p.apply(geom.pixel_centers()), axis=1) for p in poses])
    c = 299_792_458.0
    bw = 2 * (r.max() - r.min()) / c / (n_bins - 8)
    t0 = 2 * r.min() / c - 4 * bw
    model = ForwardModel(geom, FalloffModel.preset("retro"), n_bins, bw, t0)
    systems = model.systems(poses)
    assert all(s.n_dropped == 0 for s in systems)
    y = rng.random((4, n_bins))
    w = rng.random((4, 3))
    w /= w.sum(axis=1, keepdims=True)
    lam = float(rng.choice([0.0, 0.05, 0.5]))
    while True:
        nu = rng.uniform(0.4, 1.2, shape) * rng.choice([-1, 1], shape)
        rho = nu * nu
        # stay away from the |.| kinks of the Laplacian term
        if np.min(np.abs(laplacian(rho))) > 0.05:
            return nu, w, y, systems, lam


def test_ac2_gradient_oracle(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_q = worst_gd = 0.0
    for _ in range(20):
        nu, w, y, systems, lam = _gradient_instance(rng)
        g = q_gradient(nu, w, y, systems, lam)
        fd = _central_diff(lambda v: q_value(v * v, w, y, systems, lam), nu)
        worst_q = max(worst_q, np.max(np.abs(fd - g)) / np.max(np.abs(g)))
        gd_sys = [systems[i % 3] for i in range(4)]
        g = gd_gradient(nu, y, gd_sys, lam)
        fd = _central_diff(lambda v: gd_objective(v * v, y, gd_sys, lam), nu)
        worst_gd = max(worst_gd, np.max(np.abs(fd - g)) / np.max(np.abs(g)))
    elapsed = time.perf_counter() - t
    ok = worst_q <= 1e-4 and worst_gd <= 1e-4 and elapsed < 30
    report(2, "gradient oracle", ok, f"max rel err Q {worst_q:.2e}, known-pose {worst_gd:.2e} (20 instances)", elapsed)
    assert ok


# -- 3 --------------------------------------------------------------------------------

def test_ac3_translation_ambiguity(report):
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    albedo = rasterize_object(np.pad(glyph("F", 48), 8), 0.5)
    traj = make_trajectory("constant_z", [(-0.25, -0.125, 1.0), (0.25, 0.125, 1.0)], 15)
    base = stack_histograms(simulate_sequence(albedo, traj))
    equal = 0
    for _ in range(10):
        dx, dy = (int(v) for v in rng.integers(-6, 7, size=2))
        shifted = shift_albedo(albedo, dx, dy)
        assert shifted.values.sum() == albedo.values.sum()  # nothing clipped
        moved = traj.shifted((-dx * albedo.pixel_pitch, -dy * albedo.pixel_pitch, 0.0))
        other = stack_histograms(simulate_sequence(shifted, moved))
        equal += int(np.array_equal(base, other))
    elapsed = time.perf_counter() - t
    ok = equal == 10 and elapsed < 10
    report(3, "translation ambiguity", ok, f"{equal}/10 shifts bin-for-bin identical", elapsed)
    assert ok


# -- 4 --------------------------------------------------------------------------------

def test_ac4_e_step_contract(report):
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    geom = GridGeometry((6, 6), 0.02)
    model = ForwardModel(geom, FalloffModel.preset("retro"), 256, gain=1e4)
    poses = [RigidTransform((0.05 * i, 0.0, 0.2)) for i in range(5)]
    systems = model.systems(poses)
    rho = rng.random((6, 6))
    y = np.stack([render(s, rho).counts for s in systems[:3]]) + rng.random((3, 256))
    w = e_step(y, systems, rho, sigma=0.5, beta=1.0)
    row_err = float(np.max(np.abs(w.sum(axis=1) - 1)))
    in_unit = bool(np.all((w >= 0) & (w <= 1)))
    w0 = e_step(y, systems, rho, sigma=0.5, beta=1e-8)
    # the small-beta limit is checked where the log-weight spread is O(1)
    res2 = np.array([[1.0, 30.0, 500.0, 2.0, 7.0]])
    w0b = posterior_from_residuals(res2, sigma=1.0, beta=1e-8)
    uni_dev = float(np.max(np.abs(w0b - 1 / 5)))
    betas = annealing_schedule(30, 1.3)
    exact_ratio = all(betas[n + 1] == 1.3 * betas[n] for n in range(29))
    ok = (row_err <= 1e-9 and in_unit and uni_dev <= 1e-6 and exact_ratio and betas[-1] == 1.0
          and betas[0] == 1.3 ** -29 and np.allclose(w0.sum(axis=1), 1, atol=1e-9))
    report(4, "E-step contract", ok,
           f"row sum err {row_err:.1e}, beta=1e-8 uniform dev {uni_dev:.1e}, "
           f"beta0={betas[0]:.6e}, ratio exact {exact_ratio}, final {betas[-1]}", time.perf_counter() - t)
    assert ok


# -- 5 --------------------------------------------------------------------------------

def test_ac5_em_ascent(report):
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = np.inf
    violations = 0
    for inst in range(5):
        geom = GridGeometry((8, 8), 0.05)
        model = ForwardModel(geom, FalloffModel.preset("retro"), 1024, gain=1e4)
        cands = [RigidTransform((x, -0.3, z)) for x in (0.15, 0.27, 0.39) for z in (0.8, 0.92, 1.04)]
        systems = model.systems(cands)
        truth = (rng.random((8, 8)) > 0.6).astype(float)
        idx = rng.integers(0, 9, size=5)
        y = np.stack([render(systems[k], truth).counts for k in idx]) + rng.normal(0, 1.0, (5, 1024))
        config = EMConfig(n_iter=6, sigma=5.0, lam=float([0, 1e-3, 1e-2, 0.1, 1.0][inst]),
                          recon_shape=(8, 8), seed=inst)
        state = initial_state(config)
        for n in range(config.n_iter):
            w = e_step(y, systems, state.albedo, config.sigma, beta=1.0)
            q0 = q_value(state.albedo, w, y, systems, config.lam)
            state = m_step(state, w, y, systems, config, inner_steps=200)
            q1 = q_value(state.albedo, w, y, systems, config.lam)
            worst = min(worst, (q1 - q0) / abs(q0))
            violations += (q1 - q0) < -1e-6 * abs(q0)
    elapsed = time.perf_counter() - t
    ok = violations == 0
    report(5, "EM ascent", ok, f"min relative Q change per M-step {worst:.3e}, "
           f"{violations}/30 M-steps below tolerance (5 instances x 6 iterations)", elapsed)
    assert ok


# -- 6 --------------------------------------------------------------------------------

def _oracle_instance():
    obj = np.zeros((8, 8))
    obj[1:7, 2] = 1
    obj[1, 2:6] = 1
    obj[4, 2:5] = 1  # an "F": no mirror or rotation symmetry
    albedo = AlbedoGrid(obj, 0.05)
    # constant-y lattice kept off-centre in x so mirrored poses are not candidates
    cands = [RigidTransform((x, -0.3, z)) for x in (0.15, 0.27, 0.39) for z in (0.8, 0.92, 1.04)]
    true_idx = [0, 4, 8, 5, 1]
    model = ForwardModel(albedo.geometry, FalloffModel.preset("retro"), 1024, gain=1e4)
    y = np.stack([render(model.system(cands[k]), albedo).counts for k in true_idx])
    return albedo, cands, true_idx, model, y


def exhaustive_assignment_residuals(y, systems):
    """Least-squares residual of the best unconstrained albedo for every pose assignment."""
    mats = [s.matrix.toarray() for s in systems]
    n_meas, n_cand = y.shape[0], len(mats)
    gram = np.stack([a.T @ a for a in mats])
    proj = np.stack([[a.T @ yi for a in mats] for yi in y])
    const = float(np.sum(y * y))
    assign = np.array(list(itertools.product(range(n_cand), repeat=n_meas)))
    res = np.empty(len(assign))
    eye = np.eye(gram.shape[1])
    for s in range(0, len(assign), 4096):
        ch = assign[s:s + 4096]
        g = gram[ch].sum(axis=1)
        b = proj[np.arange(n_meas)[None], ch].sum(axis=1)
        x = np.linalg.solve(g + 1e-12 * eye, b[..., None])[..., 0]
        res[s:s + 4096] = const - np.sum(b * x, axis=1)
    return assign, res


def test_ac6_small_instance_oracle(report):
    t = time.perf_counter()
    albedo, cands, true_idx, model, y = _oracle_instance()
    assign, res = exhaustive_assignment_residuals(y, model.systems(cands))
    order = np.argsort(res)
    unique = list(assign[order[0]]) == true_idx and res[order[1]] > 1e6 * max(res[order[0]], 1e-9)
    config = EMConfig(sigma=5.0, lam=0.0, recon_shape=(8, 8))
    result = em_reconstruct(y, cands, model, config)
    est = [int(i) for i in result.weights.argmax(axis=1)]
    score = disambiguated_ssim(albedo.values, result.albedo.values)[0]
    elapsed = time.perf_counter() - t
    ok = unique and est == true_idx and score >= 0.9 and elapsed < 120
    report(6, "small-instance oracle", ok,
           f"oracle unique {unique} (best {res[order[0]]:.1e}, runner-up {res[order[1]]:.1e}); "
           f"EM poses {est} vs {true_idx}; dSSIM {score:.3f}", elapsed)
    assert ok


# -- 7 --------------------------------------------------------------------------------

@pytest.mark.slow
def test_ac7_desk_scale_trend(tmp_path, report):
    t = time.perf_counter()
    objects = ["glyph:K", "glyph:E", "glyph:Y"]
    spec = ExperimentSpec(
        objects=objects, trajectories=["f"], snrs=[15], methods=["gd", "em"],
        config=EMConfig(), output_dir=str(tmp_path / "ac7"), seed=0,
    )
    table = run_experiment(spec)
    header, row = table[0], table[1]
    gd = float(row[header.index("snr15_gd")])
    em = float(row[header.index("snr15_em")])
    # reference: the score an all-zero reconstruction gets under the same metric
    search = DisambiguationSearch.for_plane(preset_trajectory("f").plane)
    floor = np.mean([disambiguated_ssim(glyph(o.split(":")[1]), np.zeros((64, 64)), search)[0] for o in objects])
    elapsed = time.perf_counter() - t
    ok = gd >= 0.55 and em >= 0.45 and gd >= em - 0.05 and elapsed < 1800
    note = None
    if em <= floor + 0.01:
        note = ("the EM mean does not exceed the empty-image reference; "
                "the EM threshold is met by the metric floor, not by recovered structure")
    report(7, "desk-scale trend", ok,
           f"GD {gd:.4f}, EM {em:.4f} (empty-image reference {floor:.4f}, gain {DESK_GAIN:g})", elapsed, note)
    assert ok


# -- 8 --------------------------------------------------------------------------------

def _smooth_image(rng, n=16, sigma=(1.8, 2.4)):
    yy, xx = np.mgrid[0:n, 0:n] - (n - 1) / 2
    img = np.zeros((n, n))
    for _ in range(3):
        cx, cy = rng.uniform(-1.5, 1.5, 2)
        s = rng.uniform(*sigma)
        img += rng.uniform(0.5, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    # asymmetric bump so no rotation or flip maps the image onto itself
    return img + 0.3 * np.exp(-((xx - 1.5) ** 2 / 5 + (yy + 1) ** 2 / 2))


def test_ac8_ssim_properties(report):
    t = time.perf_counter()
    rng = np.random.default_rng(8)
    x = rng.random((64, 64))
    identity = ssim(x, x) == 1.0
    # random pairs with min 0 and max 1 so plain and disambiguated SSIM share one scaling
    below = 0
    for _ in range(50):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        for im in (a, b):
            im.flat[0], im.flat[1] = 0.0, 1.0
        d = disambiguated_ssim(a, b)[0]
        below += int(d < ssim(a, b))
    # group self-consistency: every rotation and flip of the default search set, each paired
    # with an in-frame shift (shifts that push content off the frame are not invertible).
    # "on grid" elements (no shift, or a right-angle rotation) have their exact inverse in the
    # set; for the rest the inverse needs the rotated shift, which is generally fractional.
    search = DisambiguationSearch()
    img = _smooth_image(rng)
    shifts = [(-2, -2), (-1, 2), (0, 0), (1, -1), (2, 1)]
    worst = {True: 1.0, False: 1.0}
    count = 0
    for rot in search.angles():
        for hflip, vflip in search.flips():
            shift = shifts[count % len(shifts)]
            moved = transform_image(img, rot, shift, hflip, vflip)
            on_grid = shift == (0, 0) or rot % 90 == 0
            worst[on_grid] = min(worst[on_grid], disambiguated_ssim(img, moved, search)[0])
            count += 1
    elapsed = time.perf_counter() - t
    ok = identity and below == 0 and min(worst.values()) >= 0.99
    report(8, "SSIM properties", ok,
           f"ssim(x,x)==1 {identity}; dSSIM<ssim in {below}/50 pairs; min dSSIM(x, rtf(x)) over {count} "
           f"rotation/flip elements: on-grid {worst[True]:.4f}, rotation+shift {worst[False]:.4f}", elapsed)
    assert ok


# -- 9 --------------------------------------------------------------------------------

def test_ac9_noise_calibration(report):
    t = time.perf_counter()
    clean = np.array([0.0, 0.1, 0.5, 1.0, 0.4, 0.05])
    peak = int(np.argmax(clean))
    parts, ok = [], True
    for target in (5, 15, 50):
        rng = np.random.default_rng(target)
        draws = np.array([apply_poisson_snr(clean, target, rng).counts[peak] for _ in range(10_000)])
        snr = draws.mean() / draws.std()
        ok &= abs(snr / target - 1) <= 0.10
        parts.append(f"{target}->{snr:.2f}")
    report(9, "noise calibration", ok, "empirical peak SNR " + ", ".join(parts), time.perf_counter() - t)
    assert ok


# -- 10 -------------------------------------------------------------------------------

def test_ac10_sweep_determinism(tmp_path, report):
    t = time.perf_counter()
    obj = tmp_path / "obj.pgm"
    img = np.zeros((16, 16))
    img[3:13, 4] = 1
    img[3, 4:11] = 1
    img[8, 4:9] = 1
    write_pgm(obj, img)
    write_pgm(tmp_path / "obj2.pgm", img[::-1].T)
    traj = {"plane": "constant_z", "waypoints": [[-0.1, 0.0, 1.0], [0.1, 0.0, 1.0]],
            "samples_per_segment": 5, "label": "line"}
    base = {
        "version": 1, "objects": [str(obj), str(tmp_path / "obj2.pgm")], "trajectories": [traj], "snrs": [15, 50],
        "methods": ["gd", "em"], "seed": 7, "gd_iterations": 20,
        "config": {"n_iter": 4, "recon_shape": [16, 16], "sigma": 5.0},
        "candidate_grid": {"shape": [3, 3], "extent": [0.2, 0.2]},
        "forward": {"gain": 1e4, "physical_size": 0.25},
        "search": {"translation_radius": 4},
    }
    summaries = []
    for run, threads in enumerate((1, 3, 1)):
        cfg = tmp_path / f"spec{run}.json"
        cfg.write_text(json.dumps({**base, "output_dir": str(tmp_path / f"run{run}")}))
        code = cli_main(["sweep", "--config", str(cfg), "--threads", str(threads)])
        assert code == 0
        summaries.append((tmp_path / f"run{run}" / "summary.csv").read_bytes())
    elapsed = time.perf_counter() - t
    complete = b"ERR" not in summaries[0]
    ok = summaries[0] == summaries[1] == summaries[2] and complete
    report(10, "sweep determinism", ok,
           f"summary bytes identical across threads 1/3/1: {summaries[0] == summaries[1] == summaries[2]} "
           f"({len(summaries[0])} bytes, all cells scored: {complete})", elapsed)
    assert ok
