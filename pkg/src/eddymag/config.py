"""Run configuration: presets for the three cylinder test cases and a text format.

The text format is INI-like, parsed with :mod:`configparser`.  Keys before the
first ``[section]`` header belong to the run itself::

    preset = 3            # 1, 2, 3 or custom
    cylinder = C2         # C1..C5, presets 2 and 3 only
    refinement = 1

    [excitation]
    steps_per_period = 50

    [solver]
    tol = 1e-10

Sections: ``geometry``, ``materials``, ``excitation``, ``solver``, ``outputs``.
Presets expand first, explicit keys override them.  Unknown sections or keys
are errors.  See the README for every key.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace

from .driver import ExcitationSpec, SolverOptions
from .mesh import (
    AIR_ID,
    COPPER_ID,
    IRON_ID,
    CylinderSpec,
    Material,
    MaterialTable,
    MeshError,
    Segment,
)

MATERIAL_NAMES = {"air": AIR_ID, "iron": IRON_ID, "copper": COPPER_ID}
MATERIAL_IDS = {v: k for k, v in MATERIAL_NAMES.items()}

# test case 1 cylinder; layers are refined together with the disk
TC1_LENGTH = 4e-3
TC1_LAYERS_PER_MM = 1.0
# base three-portion cylinder C1 (iron / copper / iron), doubled per index
BASE_IRON = 2e-3
BASE_COPPER = 4e-3


class ConfigError(ValueError):
    pass


@dataclass
class Outputs:
    csv: str = "records.csv"
    errors: str = "errors.csv"
    vtk_times: tuple = ()
    planes: tuple = ()  # ((name, z), ...)
    oracle: bool = True


@dataclass
class RunConfig:
    geometry: CylinderSpec
    materials: MaterialTable
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)
    outputs: Outputs = field(default_factory=Outputs)
    preset: str = "custom"
    refinement: int = 0
    cylinder: int | None = None

    @property
    def name(self) -> str:
        if self.preset == "custom":
            return f"custom_L{self.refinement}"
        cyl = f"_C{self.cylinder}" if self.cylinder else ""
        return f"tc{self.preset}{cyl}_L{self.refinement}"


def default_materials() -> MaterialTable:
    return MaterialTable(
        {
            AIR_ID: Material(0.0, 1.0),
            IRON_ID: Material(1e7, 1500.0),
            COPPER_ID: Material(6e7, 1.0),
        }
    )


def three_portion_segments(cylinder: int, copper_eddy: bool) -> tuple:
    if not 1 <= cylinder <= 5:
        raise ConfigError(f"cylinder index must be in C1..C5, got C{cylinder}")
    s = 2 ** (cylinder - 1)
    return (
        Segment(BASE_IRON * s, IRON_ID, True),
        Segment(BASE_COPPER * s, COPPER_ID, copper_eddy),
        Segment(BASE_IRON * s, IRON_ID, True),
    )


def preset_config(preset: int | str, refinement: int = 0, cylinder: int | None = None) -> RunConfig:
    preset = str(preset)
    if refinement < 0:
        raise ConfigError("refinement must be non-negative")
    if preset == "1":
        if cylinder is not None:
            raise ConfigError("preset 1 has no cylinder index")
        geom = CylinderSpec(
            segments=(Segment(TC1_LENGTH, IRON_ID, True),),
            layers_per_mm=TC1_LAYERS_PER_MM * 2**refinement,
            radial_level=refinement,
        )
        planes = ()
    elif preset in ("2", "3"):
        cylinder = 1 if cylinder is None else cylinder
        segs = three_portion_segments(cylinder, copper_eddy=preset == "2")
        geom = CylinderSpec(segments=segs, layers_per_mm=1.0, radial_level=refinement)
        planes = (("iron_port", 0.0), ("copper_mid", segs[0].length + segs[1].length / 2))
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    return RunConfig(
        geometry=geom,
        materials=default_materials(),
        outputs=Outputs(planes=planes),
        preset=preset,
        refinement=refinement,
        cylinder=cylinder,
    )


_RUN_KEYS = {"preset", "refinement", "cylinder"}
_GEOMETRY_KEYS = {
    "core_radius",
    "outer_radius",
    "segments",
    "layers_per_mm",
    "grading",
    "conductor_rings",
    "air_rings",
    "angular_segments",
}
_EXCITATION_KEYS = {"amplitude", "frequency", "periods", "steps_per_period", "period"}
_SOLVER_KEYS = {"method", "tol", "max_iter", "precond", "regularization"}
_OUTPUT_KEYS = {"csv", "errors", "vtk_times", "planes", "oracle"}
_SECTIONS = {
    "run": _RUN_KEYS,
    "geometry": _GEOMETRY_KEYS,
    "materials": set(MATERIAL_NAMES),
    "excitation": _EXCITATION_KEYS,
    "solver": _SOLVER_KEYS,
    "outputs": _OUTPUT_KEYS,
}


def _line_of(text: str, section: str, key: str) -> int:
    current = "run"
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[(\w+)\]", line)
        if m:
            current = m.group(1).lower()
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line, re.I):
            return no
    return 0


def _num(text, section, key, value, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"line {_line_of(text, section, key)}: {key} = {value!r} is not a valid {kind.__name__}")


def _parse_segments(value: str):
    segs = []
    for part in value.split(","):
        bits = [b.strip() for b in part.split(":")]
        if len(bits) != 3 or bits[0] not in MATERIAL_NAMES or bits[2] not in ("eddy", "static"):
            raise ConfigError(f"segment {part.strip()!r} must read material:length:eddy|static")
        segs.append(Segment(float(bits[1]), MATERIAL_NAMES[bits[0]], bits[2] == "eddy"))
    return tuple(segs)


def _parse_cylinder(value: str) -> int:
    m = re.fullmatch(r"[Cc]?(\d+)", value.strip())
    if not m:
        raise ConfigError(f"cylinder {value!r} must read C1..C5")
    return int(m.group(1))


def parse_config(text: str) -> RunConfig:
    """Parse the configuration text; see the module docstring for the grammar."""
    if not re.search(r"^\s*(preset|\[geometry\])", text, re.M | re.I):
        raise ConfigError("missing preset or geometry")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        msg = str(exc)
        m = re.search(r"line:? (\d+)", msg)
        if m:
            msg = re.sub(r"line:? \d+", f"line {int(m.group(1)) - 1}", msg)
        raise ConfigError(f"parse error: {msg}") from exc

    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"line {_line_of(text, sec, '')}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in _SECTIONS[sec]:
                raise ConfigError(f"line {_line_of(text, sec, key)}: unknown key {key!r} in [{sec}]")

    run = cp["run"]
    preset = run.get("preset", "custom").strip().lower()
    refinement = _num(text, "run", "refinement", run.get("refinement", "0"), int)
    cylinder = _parse_cylinder(run["cylinder"]) if "cylinder" in run else None

    try:
        if preset == "custom":
            if "geometry" not in cp or "segments" not in cp["geometry"]:
                raise ConfigError("missing preset or geometry")
            cfg = RunConfig(
                geometry=CylinderSpec(segments=_parse_segments(cp["geometry"]["segments"]), radial_level=refinement),
                materials=default_materials(),
                refinement=refinement,
            )
        else:
            cfg = preset_config(preset, refinement, cylinder)

        if "geometry" in cp:
            g = cp["geometry"]
            kw = {}
            for key in g:
                if key == "segments":
                    kw[key] = _parse_segments(g[key])
                elif key in ("conductor_rings", "air_rings", "angular_segments"):
                    kw[key] = _num(text, "geometry", key, g[key], int)
                else:
                    kw[key] = _num(text, "geometry", key, g[key])
            cfg.geometry = replace(cfg.geometry, **kw)

        if "materials" in cp:
            mats = dict(cfg.materials.materials)
            for key in cp["materials"]:
                vals = [v.strip() for v in cp["materials"][key].split(",")]
                if len(vals) != 2:
                    raise ConfigError(f"line {_line_of(text, 'materials', key)}: {key} needs 'sigma, mu_r'")
                mats[MATERIAL_NAMES[key]] = Material(
                    _num(text, "materials", key, vals[0]), _num(text, "materials", key, vals[1])
                )
            cfg.materials = MaterialTable(mats)

        if "excitation" in cp:
            e = cp["excitation"]
            kw = {}
            for key in e:
                kind = int if key in ("periods", "steps_per_period") else float
                kw[key] = _num(text, "excitation", key, e[key], kind)
            cfg.excitation = replace(cfg.excitation, **kw)

        if "solver" in cp:
            s = cp["solver"]
            kw = {}
            for key in s:
                if key in ("method", "precond"):
                    kw[key] = s[key].strip()
                else:
                    kw[key] = _num(text, "solver", key, s[key], int if key == "max_iter" else float)
            cfg.solver = replace(cfg.solver, **kw)

        if "outputs" in cp:
            o = cp["outputs"]
            kw = {}
            for key in o:
                val = o[key].strip()
                if key in ("csv", "errors"):
                    kw[key] = val
                elif key == "oracle":
                    kw[key] = o.getboolean(key)
                elif key == "vtk_times":
                    kw[key] = tuple(float(v) for v in val.split(",") if v.strip())
                else:
                    planes = []
                    for item in val.split(","):
                        if item.strip():
                            name, z = item.split(":")
                            planes.append((name.strip(), float(z)))
                    kw[key] = tuple(planes)
            cfg.outputs = replace(cfg.outputs, **kw)
    except (MeshError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc

    if not any(cfg.materials[s.material_id].sigma > 0 for s in cfg.geometry.segments):
        raise ConfigError("no conductive segment: the core must contain a conductor")
    # layer divisibility is a geometry error worth reporting before any work
    try:
        cfg.geometry.layer_counts()
    except MeshError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Fully explicit text that :func:`parse_config` maps back to ``cfg``."""
    g, e, s, o = cfg.geometry, cfg.excitation, cfg.solver, cfg.outputs
    segs = ", ".join(
        f"{MATERIAL_IDS[x.material_id]}:{x.length!r}:{'eddy' if x.eddy else 'static'}" for x in g.segments
    )
    lines = [f"preset = {cfg.preset}", f"refinement = {cfg.refinement}"]
    if cfg.cylinder is not None:
        lines.append(f"cylinder = C{cfg.cylinder}")
    lines += [
        "",
        "[geometry]",
        f"core_radius = {g.core_radius!r}",
        f"outer_radius = {g.outer_radius!r}",
        f"segments = {segs}",
        f"layers_per_mm = {g.layers_per_mm!r}",
        f"grading = {g.grading!r}",
        f"conductor_rings = {g.conductor_rings}",
        f"air_rings = {g.air_rings}",
        f"angular_segments = {g.angular_segments}",
        "",
        "[materials]",
    ]
    for mid, mat in sorted(cfg.materials.materials.items()):
        lines.append(f"{MATERIAL_IDS[mid]} = {mat.sigma!r}, {mat.mu_r!r}")
    lines += [
        "",
        "[excitation]",
        f"amplitude = {e.amplitude!r}",
        f"frequency = {e.frequency!r}",
        f"periods = {e.periods}",
        f"steps_per_period = {e.steps_per_period}",
    ]
    if e.period is not None:
        lines.append(f"period = {e.period!r}")
    lines += [
        "",
        "[solver]",
        f"method = {s.method}",
        f"tol = {s.tol!r}",
        f"max_iter = {s.max_iter}",
        f"precond = {s.precond}",
        f"regularization = {s.regularization!r}",
        "",
        "[outputs]",
        f"csv = {o.csv}",
        f"errors = {o.errors}",
        f"oracle = {'true' if o.oracle else 'false'}",
        "vtk_times = " + ", ".join(repr(t) for t in o.vtk_times),
        "planes = " + ", ".join(f"{n}:{z!r}" for n, z in o.planes),
    ]
    return "\n".join(lines) + "\n"
