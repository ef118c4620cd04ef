import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terranav import sim
from terranav.config import CameraConfig, ImuConfig, SimConfig, WorldConfig
from oracles import arc_pose

SIM = SimConfig()
CAM = CameraConfig()


def open_world(cls=0, shape=(40, 40), **kw):
    return sim.make_world(np.full(shape, cls, dtype=np.uint8), **kw)


# generation ---------------------------------------------------------------- #

@pytest.fixture(scope="module")
def generated():
    return sim.generate_world(WorldConfig(), 1)


def test_generation_deterministic(generated):
    again = sim.generate_world(WorldConfig(), 1)
    np.testing.assert_array_equal(generated.grid, again.grid)
    np.testing.assert_array_equal(generated.canopy, again.canopy)
    other = sim.generate_world(WorldConfig(), 2)
    assert not np.array_equal(generated.grid, other.grid)


def test_generation_invariants(generated):
    w = generated
    assert w.n_classes == 4
    assert np.all(w.grid[w.obstacle] == 3)
    assert w.canopy.shape == w.grass.shape == w.grid.shape
    frac = w.canopy.mean()
    assert 0.18 <= frac <= 0.22
    assert not np.any(w.canopy & w.grass)
    from scipy import ndimage
    _, n = ndimage.label(~w.obstacle)
    assert n == 1


def test_world_file_round_trip(generated, tmp_path):
    path = tmp_path / "w.bin"
    sim.save_world(generated, path)
    loaded = sim.load_world(path)
    for name in ("grid", "obstacle", "canopy", "grass", "texture"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(generated, name))
    assert loaded.config == generated.config and loaded.seed == generated.seed
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValueError):
        sim.load_world(path)


def test_ppm_export(tmp_path):
    img = sim.render_aerial(open_world(), sim.initial_state(10, 10, 0, SIM), CAM)
    path = tmp_path / "a.ppm"
    sim.write_ppm(img, path)
    data = path.read_bytes()
    assert data.startswith(b"P6\n32 24\n255\n") and len(data) == len(b"P6\n32 24\n255\n") + 24 * 32 * 3


# kinematics ---------------------------------------------------------------- #

def test_straight_step():
    w = open_world()
    s0 = sim.initial_state(10, 10, 0.3, SIM)
    s1, ev = sim.step(w, s0, 0.0, SIM)
    d = SIM.speed * SIM.dt
    assert s1.x == pytest.approx(10 + d * math.cos(0.3), abs=1e-12)
    assert s1.y == pytest.approx(10 + d * math.sin(0.3), abs=1e-12)
    assert s1.heading == pytest.approx(0.3, abs=1e-15)
    assert not ev.collided and ev.traversed_class == 0


@pytest.mark.parametrize("action", [1.0, -0.6, 0.25])
def test_circle_closure(action):
    w = open_world(shape=(200, 200))
    radius = SIM.wheelbase / math.tan(math.radians(SIM.max_steer_deg) * abs(action))
    dt = 0.01
    s = sim.initial_state(50, 50, 0.0, SIM)
    n = round(2 * math.pi * radius / (SIM.speed * dt))
    for _ in range(n):
        s, _ = sim.step(w, s, action, SIM, dt=dt)
    assert math.hypot(s.x - 50, s.y - 50) < 0.01 * 2 * math.pi * radius
    # the centre sits one radius to the side
    cy = 50 + math.copysign(radius, action)
    s2, _ = sim.step(w, sim.initial_state(50, 50, 0.0, SIM), action, SIM, dt=0.3)
    assert math.hypot(s2.x - 50, s2.y - cy) == pytest.approx(radius, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-math.pi, math.pi))
def test_step_matches_arc_oracle(action, heading):
    w = open_world(shape=(80, 80))
    s0 = sim.initial_state(20, 20, heading, SIM)
    s1, _ = sim.step(w, s0, action, SIM)
    ex, ey, eh = arc_pose(20, 20, heading, SIM.speed,
                          math.radians(SIM.max_steer_deg) * action, SIM.wheelbase, SIM.dt)
    assert s1.x == pytest.approx(ex, abs=1e-9) and s1.y == pytest.approx(ey, abs=1e-9)
    dh = math.remainder(s1.heading - eh, 2 * math.pi)
    assert abs(dh) < 1e-9
    assert s1.speed == s0.speed
    bound = SIM.speed / SIM.wheelbase * math.tan(math.radians(SIM.max_steer_deg)) * SIM.dt
    assert abs(math.remainder(s1.heading - heading, 2 * math.pi)) <= bound + 1e-12


def test_step_rejects_bad_inputs():
    w = open_world()
    s = sim.initial_state(10, 10, 0, SIM)
    with pytest.raises(ValueError):
        sim.step(w, s, 1.5, SIM)
    with pytest.raises(ValueError):
        sim.step(w, s, 0.0, SIM, dt=0.0)


def test_leaving_map_is_collision():
    w = open_world(shape=(10, 10))
    s = sim.initial_state(4.9, 2.5, 0.0, SIM)
    s1, ev = sim.step(w, s, 0.0, SIM)
    assert ev.collided and ev.traversed_class == 3
    assert w.in_bounds(s1.x, s1.y)


def test_collision_implies_short_range():
    grid = np.zeros((20, 20), np.uint8)
    grid[:, 12] = 3
    w = sim.make_world(grid)
    s = sim.initial_state(5.0, 5.0, 0.0, SIM)
    for _ in range(20):
        s, ev = sim.step(w, s, 0.0, SIM)
        if ev.collided:
            assert ev.min_range < SIM.collision_range
            break
    else:
        pytest.fail("never collided with the wall")


# range --------------------------------------------------------------------- #

def test_range_no_obstacle():
    assert sim.sense_range(open_world(), sim.initial_state(10, 10, 0, SIM), SIM) == SIM.max_range


def test_range_wall_ahead():
    grid = np.zeros((20, 40), np.uint8)
    grid[:, 24] = 3                         # wall face at x = 12 m
    w = sim.make_world(grid)
    r = sim.sense_range(w, sim.initial_state(10.0, 5.0, 0.0, SIM), SIM)
    assert abs(r - 2.0) <= w.cell_size


def test_range_monotone_on_approach():
    grid = np.zeros((20, 40), np.uint8)
    grid[8:12, 30] = 3
    w = sim.make_world(grid)
    ranges = [sim.sense_range(w, sim.initial_state(x, 5.0, 0.0, SIM), SIM)
              for x in np.arange(11.5, 14.6, 0.25)]
    assert all(b <= a for a, b in zip(ranges, ranges[1:]))
    assert ranges[-1] < ranges[0]


# cameras ------------------------------------------------------------------- #

@pytest.mark.parametrize("cls", [0, 1, 2])
def test_ground_view_single_class(cls):
    w = open_world(cls, shape=(80, 80))
    img = sim.render_ground(w, sim.initial_state(20, 20, 0.7, SIM), CAM)
    labels = sim.pixel_classes(img, 4)
    assert set(np.unique(labels)) <= {cls, -3}
    assert (labels == cls).mean() > 0.5


def test_renders_deterministic():
    w = sim.generate_world(WorldConfig(), 3)
    s = sim.initial_state(30, 30, 1.0, SIM)
    assert sim.render_ground(w, s, CAM).tobytes() == sim.render_ground(w, s, CAM).tobytes()
    assert sim.render_aerial(w, s, CAM).tobytes() == sim.render_aerial(w, s, CAM).tobytes()


def test_obstacle_occludes_terrain_behind():
    # corridor: smooth floor, an obstacle block 1.5 m ahead, rough floor behind it
    grid = np.zeros((40, 40), np.uint8)
    grid[:, 24:] = 2
    grid[18:22, 23] = 3
    w = sim.make_world(grid, texture=False)
    s = sim.initial_state(10.0, 10.0, 0.0, SIM)
    obstacle_dist, _ = sim.ground_view_limits(w, s, CAM)
    img_labels = sim.pixel_classes(sim.render_ground(w, s, CAM), 4)
    centre = CAM.ground_width // 2
    for col in (centre - 1, centre):
        assert 1.4 < obstacle_dist[col] < 1.8
        column = img_labels[:, col]
        assert 3 in column and 2 not in column
    # without the block the rough floor is visible in those columns
    open_ = grid.copy()
    open_[open_ == 3] = 0
    labels = sim.pixel_classes(sim.render_ground(sim.make_world(open_, texture=False), s, CAM), 4)
    assert 2 in labels[:, centre]


def test_grass_shortens_ground_view_only():
    grid = np.zeros((40, 40), np.uint8)
    grid[:, 22:] = 1
    grass = np.zeros_like(grid, bool)
    grass[:, 21:25] = True
    s = sim.initial_state(10.0, 10.0, 0.0, SIM)
    plain = sim.make_world(grid, texture=False)
    grassy = sim.make_world(grid, grass=grass, texture=False)
    _, gd = sim.ground_view_limits(grassy, s, CAM)
    assert np.all(np.isfinite(gd[10:22]))
    g_plain = sim.pixel_classes(sim.render_ground(plain, s, CAM), 4)
    g_grass = sim.pixel_classes(sim.render_ground(grassy, s, CAM), 4)
    assert (g_plain == 1).sum() > 0 and (g_grass == 1).sum() < (g_plain == 1).sum()
    assert (g_grass == -2).sum() > 0
    np.testing.assert_array_equal(sim.render_aerial(plain, s, CAM),
                                  sim.render_aerial(grassy, s, CAM))


def test_canopy_hides_aerial_only():
    grid = np.zeros((60, 60), np.uint8)
    grid[::3] = 2
    canopy = np.ones_like(grid, bool)
    s = sim.initial_state(15.0, 15.0, 0.4, SIM)
    a = sim.pixel_classes(sim.render_aerial(sim.make_world(grid, canopy=canopy), s, CAM), 4)
    assert np.all(a == -1)
    g_open = sim.render_ground(sim.make_world(grid), s, CAM)
    g_can = sim.render_ground(sim.make_world(grid, canopy=canopy), s, CAM)
    np.testing.assert_array_equal(g_open, g_can)


def test_aerial_border_color():
    w = open_world(shape=(20, 20))
    a = sim.pixel_classes(sim.render_aerial(w, sim.initial_state(1.0, 5.0, math.pi, SIM), CAM), 4)
    assert (a == -4).any()


def test_aerial_footprint_and_rotation():
    s_east = sim.initial_state(30, 30, 0.0, SIM)
    s_north = sim.initial_state(30, 30, math.pi / 2, SIM)
    xe, ye = sim.aerial_sample_points(s_east, CAM)
    xn, yn = sim.aerial_sample_points(s_north, CAM)
    # rotating every east-facing texel by +90 deg about the vehicle gives the north texels
    np.testing.assert_allclose(xn - 30, -(ye - 30), atol=1e-12)
    np.testing.assert_allclose(yn - 30, xe - 30, atol=1e-12)
    fwd = xe - 30
    along = (fwd.max() - fwd.min()) * CAM.aerial_height / (CAM.aerial_height - 1)
    across = (ye.max() - ye.min()) * CAM.aerial_width / (CAM.aerial_width - 1)
    assert along == pytest.approx(9.0) and across == pytest.approx(12.0)
    assert fwd.mean() == pytest.approx(1.5)


def test_aerial_samples_world_per_pixel():
    w = sim.generate_world(WorldConfig(canopy_fraction=0.0, grass_fraction=0.0), 4)
    s = sim.initial_state(31.0, 27.0, 2.1, SIM)
    px, py = sim.aerial_sample_points(s, CAM)
    img = sim.render_aerial(w, s, CAM)
    for i in range(0, CAM.aerial_height, 5):
        for j in range(0, CAM.aerial_width, 7):
            expected = np.clip(sim.CLASS_COLORS[w.class_at(px[i, j], py[i, j])]
                               + CAM.noise_amplitude * w.texture[int(py[i, j] // 0.5),
                                                                   int(px[i, j] // 0.5)], 0, 1)
            np.testing.assert_allclose(img[i, j], expected)


def test_views_agree_without_masks():
    w = sim.generate_world(WorldConfig(canopy_fraction=0.0, grass_fraction=0.0), 5)
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = sim.initial_state(*rng.uniform(8, 52, 2), rng.uniform(-math.pi, math.pi), SIM)
        px, py = sim.aerial_sample_points(s, CAM)
        a = sim.pixel_classes(sim.render_aerial(w, s, CAM), 4)
        truth = np.vectorize(w.class_at)(px, py)
        assert np.array_equal(a, truth)


# vibration ----------------------------------------------------------------- #

def test_sine_rms_identity():
    cfg = ImuConfig(freq_jitter=0.0, amp_jitter=0.0, noise=0.0)
    w = open_world()
    s = sim.initial_state(5, 5, 0, SIM)
    rng = np.random.default_rng(0)
    for cls, amp in enumerate(cfg.amplitudes):
        sig = sim.synth_imu(w, s, cfg, rng, terrain_class=cls)
        peak = math.sqrt(2) * amp
        rms = math.sqrt(np.mean(sig ** 2))
        assert abs(rms - peak / math.sqrt(2)) <= 0.05 * peak / math.sqrt(2)


def test_vibration_class_separation():
    cfg = ImuConfig()
    w = open_world()
    s = sim.initial_state(5, 5, 0, SIM)
    rng = np.random.default_rng(1)
    stats = []
    for cls in range(3):
        r = [math.sqrt(np.mean(sim.synth_imu(w, s, cfg, rng, cls) ** 2)) for _ in range(1000)]
        stats.append((np.mean(r), np.std(r)))
    for (m0, s0), (m1, s1) in zip(stats, stats[1:]):
        assert m1 > m0
        assert m1 - m0 >= 3 * max(s0, s1)


def test_vibration_scales_with_speed():
    cfg = ImuConfig(freq_jitter=0.0, amp_jitter=0.0, noise=0.0)
    w = open_world()
    slow = replace(sim.initial_state(5, 5, 0, SIM), speed=SIM.speed / 2)
    fast = sim.initial_state(5, 5, 0, SIM)
    a = sim.synth_imu(w, slow, cfg, np.random.default_rng(3), 1)
    b = sim.synth_imu(w, fast, cfg, np.random.default_rng(3), 1)
    np.testing.assert_allclose(2 * a, b)
