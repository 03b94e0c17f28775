from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from eddymag.config import (
    ConfigError,
    RunConfig,
    parse_config,
    preset_config,
    serialize_config,
    three_portion_segments,
)
from eddymag.mesh import COPPER_ID, IRON_ID, build_cylinder_mesh


def test_preset1_refinement2():
    cfg = preset_config(1, 2)
    assert cfg.name == "tc1_L2"
    assert cfg.geometry.radial_level == 2
    assert cfg.geometry.layers_per_mm == 4.0
    assert [s.material_id for s in cfg.geometry.segments] == [IRON_ID]
    assert cfg.outputs.planes == ()


def test_empty_file():
    with pytest.raises(ConfigError, match="missing preset or geometry"):
        parse_config("")
    with pytest.raises(ConfigError, match="missing preset or geometry"):
        parse_config("# nothing\n[excitation]\nperiods = 2\n")


def test_preset3_c2_level1():
    cfg = parse_config("preset = 3\ncylinder = C2\nrefinement = 1\n")
    segs = cfg.geometry.segments
    assert [s.length for s in segs] == pytest.approx([4e-3, 8e-3, 4e-3])
    assert [s.material_id for s in segs] == [IRON_ID, COPPER_ID, IRON_ID]
    assert [s.eddy for s in segs] == [True, False, True]
    assert cfg.name == "tc3_C2_L1"
    assert dict(cfg.outputs.planes) == pytest.approx({"iron_port": 0.0, "copper_mid": 8e-3})


@pytest.mark.parametrize("cyl", [1, 2, 3, 4, 5])
def test_presets_2_and_3_differ_only_in_copper_flag(cyl):
    a = preset_config(2, 0, cyl)
    b = preset_config(3, 0, cyl)
    assert a.geometry.segments[1].eddy and not b.geometry.segments[1].eddy
    flipped = tuple(replace(s, eddy=True) for s in b.geometry.segments)
    b = replace(b, geometry=replace(b.geometry, segments=flipped), preset=a.preset)
    assert serialize_config(a) == serialize_config(b)


def test_cylinder_doubling():
    for k in range(1, 5):
        lo = three_portion_segments(k, True)
        hi = three_portion_segments(k + 1, True)
        assert [h.length for h in hi] == pytest.approx([2 * s.length for s in lo], rel=1e-15)
    with pytest.raises(ConfigError):
        three_portion_segments(6, True)


@pytest.mark.parametrize("preset,cyl", [(1, None), (2, 1), (3, 3)])
def test_round_trip(preset, cyl):
    cfg = preset_config(preset, 1, cyl)
    text = serialize_config(cfg)
    back = parse_config(text)
    assert back == cfg
    assert serialize_config(back) == text


@settings(max_examples=25, deadline=None)
@given(
    amp=st.floats(-10, 10, allow_nan=False).filter(lambda v: v != 0),
    spp=st.integers(1, 200),
    tol=st.floats(1e-14, 1e-3),
    lengths=st.lists(st.integers(1, 6), min_size=1, max_size=3),
)
def test_round_trip_custom(amp, spp, tol, lengths):
    segs = ", ".join(f"iron:{n}e-3:eddy" for n in lengths)
    text = f"[geometry]\nsegments = {segs}\n[excitation]\namplitude = {amp!r}\nsteps_per_period = {spp}\n[solver]\ntol = {tol!r}\n"
    cfg = parse_config(text)
    assert cfg.excitation.amplitude == amp and cfg.solver.tol == tol
    assert parse_config(serialize_config(cfg)) == cfg


def test_overrides_apply():
    cfg = parse_config("preset = 1\n[excitation]\nperiods = 3\nfrequency = 60\n[materials]\niron = 5e6, 1000\n")
    assert cfg.excitation.periods == 3 and cfg.excitation.frequency == 60.0
    assert cfg.materials[IRON_ID].sigma == 5e6 and cfg.materials[IRON_ID].mu_r == 1000.0


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"line 4: unknown key 'frequncy'"):
        parse_config("preset = 1\n\n[excitation]\nfrequncy = 50\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"unknown section \[mesh\]"):
        parse_config("preset = 1\n[mesh]\nx = 1\n")


@pytest.mark.parametrize(
    "text",
    [
        "preset = 1\n[solver]\ntol = -1\n",
        "preset = 1\n[solver]\nprecond = magic\n",
        "preset = 1\n[excitation]\nsteps_per_period = 0\n",
        "preset = 1\n[excitation]\nperiods = two\n",
        "preset = 2\ncylinder = C9\n",
        "preset = 7\n",
        "preset = 1\n[geometry]\ncore_radius = 9e-3\n",
        "[geometry]\nsegments = iron:1e-3\n",
        "[geometry]\nsegments = air:4e-3:eddy\n",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_layer_divisibility_checked_before_meshing():
    with pytest.raises(ConfigError):
        parse_config("[geometry]\nsegments = iron:1.5e-3:eddy\nlayers_per_mm = 1\n")


def test_preset_meshes_build():
    for cfg in (preset_config(1), preset_config(2), preset_config(3)):
        assert isinstance(cfg, RunConfig)
        mesh = build_cylinder_mesh(cfg.geometry)
        assert mesh.n_tets > 0
