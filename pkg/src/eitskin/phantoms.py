"""Synthetic interaction scenes standing in for the physical sensor.

Touch and bend enter purely as conductivity perturbations on the mesh:
touches as truncated Gaussian bumps (pressure raises local conductivity),
bends as a raised-cosine band across the domain. Frames are produced by the
full nonlinear forward solve plus seeded additive Gaussian noise, so the
linearized reconstruction downstream is genuinely approximate.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .fem import ConductivityField, MeasurementFrame, Mesh

K_TOUCH_PER_NEWTON = 0.05      # 10 N -> peak 0.5 * sigma0
K_BEND_PER_DEGREE = 0.01       # 60 deg -> 0.6 * sigma0 at band center
TOUCH_RAISES_CONDUCTIVITY = True  # single global sign switch
DEFAULT_TOUCH_RADIUS_MM = 7.5  # half the 15 mm indenter
DEFAULT_TOUCH_FORCE_N = 10.0
BEND_BAND_MM = (55.0, 95.0)    # 4 cm band centered in x
MAX_BEND_ANGLE_DEG = 60.0
DEFAULT_SNR_DB = 60.0
SIGMA_FLOOR_FRACTION = 0.05    # keep conductivity positive under deep dips


@dataclass(frozen=True)
class TouchPhantom:
    """Localized conductivity bump for an indenter press."""

    x_mm: float
    y_mm: float
    force_n: float = DEFAULT_TOUCH_FORCE_N
    radius_mm: float = DEFAULT_TOUCH_RADIUS_MM
    k_touch: float = K_TOUCH_PER_NEWTON

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("touch radius must be positive")
        if self.force_n < 0:
            raise ValueError("touch force must be nonnegative")
        if self.k_touch <= 0:
            raise ValueError("k_touch must be positive")

    @property
    def delta_sigma_peak(self) -> float:
        return self.k_touch * self.force_n


@dataclass(frozen=True)
class BendPhantom:
    """Distributed conductivity band for a flexed region."""

    angle_deg: float
    band_mm: tuple = BEND_BAND_MM
    k_bend: float = K_BEND_PER_DEGREE

    def __post_init__(self):
        if not 0.0 <= self.angle_deg <= MAX_BEND_ANGLE_DEG:
            raise ValueError(f"bend angle must be in [0, {MAX_BEND_ANGLE_DEG}] degrees")
        if self.band_mm[1] <= self.band_mm[0]:
            raise ValueError("bend band must have positive width")


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian noise at a configured SNR relative to frame RMS."""

    snr_db: float = DEFAULT_SNR_DB

    def amplitude(self, voltages: np.ndarray) -> float:
        if math.isinf(self.snr_db):
            return 0.0
        rms = float(np.sqrt(np.mean(voltages ** 2)))
        return rms / (10.0 ** (self.snr_db / 20.0))


@dataclass(frozen=True)
class Scenario:
    """Deterministic schedule of phantom sets to synthesize as frames."""

    name: str
    frame_schedule: tuple  # of (time_ms, tuple of phantoms)
    noise: NoiseModel = NoiseModel()
    seed: int = 0

    def __post_init__(self):
        times = [t for t, _ in self.frame_schedule]
        if any(t1 >= t2 for t1, t2 in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")


@dataclass(frozen=True)
class FrameLogEntry:
    frame: MeasurementFrame
    label: str   # idle | touch | bend | touch+bend
    truth: dict  # phantom parameters for scoring


@dataclass(frozen=True)
class FrameLog:
    entries: tuple  # of FrameLogEntry

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def n_measurements(self) -> int:
        return len(self.entries[0].frame.voltages) if self.entries else 0


class SensorModel:
    """The simulated sensor: mesh, electrodes, protocol, and background."""

    def __init__(self, mesh: Mesh, layout, protocol, sigma0: float = fem.DEFAULT_SIGMA0):
        self.mesh = mesh
        self.layout = layout
        self.protocol = protocol
        self.sigma0 = sigma0
        self._clean_reference = None

    @classmethod
    def default(cls, target_elem_size: float = fem.DEFAULT_ELEM_SIZE_MM,
                scheme: str = "adjacent",
                n_electrodes: int = fem.DEFAULT_ELECTRODE_COUNT) -> "SensorModel":
        mesh = fem.build_rect_mesh(target_elem_size=target_elem_size)
        layout = fem.place_electrodes(mesh, n_electrodes)
        protocol = fem.build_protocol(n_electrodes, scheme)
        return cls(mesh, layout, protocol)

    def clean_reference(self) -> np.ndarray:
        """Noise-free boundary voltages of the undisturbed sensor."""
        if self._clean_reference is None:
            frame = fem.homogeneous_frame(self.mesh, self.layout,
                                          self.protocol, self.sigma0)
            self._clean_reference = frame.voltages
        return self._clean_reference


def touch_delta(phantom: TouchPhantom, mesh: Mesh) -> np.ndarray:
    """Per-element conductivity change for one touch.

    Gaussian in centroid distance d with scale radius/2, truncated to zero
    beyond 2*radius; peak value k_touch * force at the center.
    """
    if not (0.0 <= phantom.x_mm <= mesh.width and 0.0 <= phantom.y_mm <= mesh.height):
        raise ValueError("touch center outside the sensor domain")
    c = mesh.element_centroids
    d2 = (c[:, 0] - phantom.x_mm) ** 2 + (c[:, 1] - phantom.y_mm) ** 2
    s = phantom.radius_mm / 2.0
    out = phantom.delta_sigma_peak * np.exp(-d2 / (2.0 * s * s))
    out[d2 > (2.0 * phantom.radius_mm) ** 2] = 0.0
    if not TOUCH_RAISES_CONDUCTIVITY:
        out = -out
    return out


def bend_delta(phantom: BendPhantom, mesh: Mesh) -> np.ndarray:
    """Per-element conductivity change for a bend.

    Raised-cosine profile across the band (1 at center, 0 at the edges),
    constant in y, scaled by k_bend * angle.
    """
    x = mesh.element_centroids[:, 0]
    lo, hi = phantom.band_mm
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    w = np.where(np.abs(x - mid) <= half,
                 0.5 * (1.0 + np.cos(np.pi * (x - mid) / half)),
                 0.0)
    return phantom.k_bend * phantom.angle_deg * w


def _combined_field(phantoms, mesh: Mesh, sigma0: float) -> ConductivityField:
    sigma = np.full(mesh.n_elements, sigma0)
    for ph in phantoms:
        if isinstance(ph, TouchPhantom):
            sigma = sigma + touch_delta(ph, mesh)
        elif isinstance(ph, BendPhantom):
            sigma = sigma + bend_delta(ph, mesh)
        else:
            raise TypeError(f"unknown phantom type: {type(ph).__name__}")
    sigma = np.maximum(sigma, SIGMA_FLOOR_FRACTION * sigma0)
    return ConductivityField(sigma=sigma, sigma0=sigma0)


def synthesize_frame(phantoms, model: SensorModel, noise: NoiseModel,
                     rng: np.random.Generator,
                     frame_id: int = 0, timestamp_ms: float = 0.0) -> MeasurementFrame:
    """Full nonlinear forward solve of the combined scene plus noise."""
    fld = _combined_field(phantoms, model.mesh, model.sigma0)
    system = fem.assemble_system(model.mesh, fld, model.layout)
    clean = fem.solve_forward(system, model.protocol)
    amp = noise.amplitude(clean.voltages)
    v = clean.voltages if amp == 0.0 else clean.voltages + rng.normal(0.0, amp, len(clean.voltages))
    return MeasurementFrame(voltages=v, frame_id=frame_id, timestamp_ms=timestamp_ms)


def label_for(phantoms) -> str:
    has_touch = any(isinstance(p, TouchPhantom) for p in phantoms)
    has_bend = any(isinstance(p, BendPhantom) for p in phantoms)
    if has_touch and has_bend:
        return "touch+bend"
    if has_touch:
        return "touch"
    if has_bend:
        return "bend"
    return "idle"


def truth_for(phantoms) -> dict:
    touches = [{"x": p.x_mm, "y": p.y_mm, "force": p.force_n, "radius": p.radius_mm}
               for p in phantoms if isinstance(p, TouchPhantom)]
    bends = [{"angle": p.angle_deg, "band": list(p.band_mm)}
             for p in phantoms if isinstance(p, BendPhantom)]
    truth = {}
    if touches:
        truth["touches"] = touches
    if bends:
        truth["bends"] = bends
    return truth


def run_scenario(scenario: Scenario, model: SensorModel) -> FrameLog:
    """Synthesize one frame per schedule entry, tagged with ground truth.

    Per-frame randomness is an independent stream seeded by
    (scenario seed, frame id), so logs are bit-identical across runs and
    frames could be generated out of order without changing the result.
    """
    entries = []
    for frame_id, (t_ms, phantoms) in enumerate(scenario.frame_schedule):
        rng = np.random.default_rng([scenario.seed, frame_id])
        frame = synthesize_frame(phantoms, model, scenario.noise, rng,
                                 frame_id=frame_id, timestamp_ms=float(t_ms))
        entries.append(FrameLogEntry(frame=frame, label=label_for(phantoms),
                                     truth=truth_for(phantoms)))
    return FrameLog(entries=tuple(entries))


# --- frame log CSV ---

def frame_log_to_csv(log: FrameLog) -> str:
    """CSV with header frame_id,timestamp_ms,label,truth_json,v_0..v_{M-1}."""
    buf = io.StringIO()
    m = log.n_measurements
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_id", "timestamp_ms", "label", "truth_json"]
                    + [f"v_{i}" for i in range(m)])
    for e in log.entries:
        writer.writerow([e.frame.frame_id, repr(e.frame.timestamp_ms), e.label,
                         json.dumps(e.truth, sort_keys=True)]
                        + [repr(float(v)) for v in e.frame.voltages])
    return buf.getvalue()


def frame_log_from_csv(text: str) -> FrameLog:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:4] != ["frame_id", "timestamp_ms", "label", "truth_json"]:
        raise ValueError("not a frame log CSV (bad header)")
    m = len(header) - 4
    entries = []
    for row in reader:
        if not row:
            continue
        frame = MeasurementFrame(
            voltages=np.array([float(v) for v in row[4:4 + m]]),
            frame_id=int(row[0]), timestamp_ms=float(row[1]))
        entries.append(FrameLogEntry(frame=frame, label=row[2],
                                     truth=json.loads(row[3])))
    return FrameLog(entries=tuple(entries))


# --- scenario files (JSON) and builtin experiment scenarios ---

def scenario_to_json(scenario: Scenario) -> str:
    frames = []
    for t_ms, phantoms in scenario.frame_schedule:
        specs = []
        for p in phantoms:
            if isinstance(p, TouchPhantom):
                specs.append({"kind": "touch", "x": p.x_mm, "y": p.y_mm,
                              "force": p.force_n, "radius": p.radius_mm})
            else:
                specs.append({"kind": "bend", "angle": p.angle_deg,
                              "band": list(p.band_mm)})
        frames.append({"t_ms": t_ms, "phantoms": specs})
    doc = {"name": scenario.name, "snr_db": scenario.noise.snr_db,
           "seed": scenario.seed, "frames": frames}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    schedule = []
    for f in doc["frames"]:
        phantoms = []
        for p in f["phantoms"]:
            if p["kind"] == "touch":
                phantoms.append(TouchPhantom(
                    x_mm=p["x"], y_mm=p["y"],
                    force_n=p.get("force", DEFAULT_TOUCH_FORCE_N),
                    radius_mm=p.get("radius", DEFAULT_TOUCH_RADIUS_MM)))
            elif p["kind"] == "bend":
                phantoms.append(BendPhantom(
                    angle_deg=p["angle"],
                    band_mm=tuple(p.get("band", BEND_BAND_MM))))
            else:
                raise ValueError(f"unknown phantom kind: {p['kind']!r}")
        schedule.append((f["t_ms"], tuple(phantoms)))
    snr = doc.get("snr_db", DEFAULT_SNR_DB)
    return Scenario(name=doc.get("name", "unnamed"),
                    frame_schedule=tuple(schedule),
                    noise=NoiseModel(snr_db=float(snr) if snr != "inf" else math.inf),
                    seed=int(doc.get("seed", 0)))


def touch_grid_positions(width: float = fem.SENSOR_WIDTH_MM,
                         height: float = fem.SENSOR_HEIGHT_MM,
                         nx: int = 6, ny: int = 3,
                         spacing: float = 15.0):
    """The single-touch evaluation grid: nx*ny positions at fixed spacing,
    centered in the domain."""
    x0 = (width - (nx - 1) * spacing) / 2.0
    y0 = (height - (ny - 1) * spacing) / 2.0
    return [(x0 + i * spacing, y0 + j * spacing)
            for j in range(ny) for i in range(nx)]


def _schedule(phantom_sets, dt_ms: float = 100.0):
    return tuple((i * dt_ms, tuple(ps)) for i, ps in enumerate(phantom_sets))


def build_touch_grid_scenario(seed: int = 0, force: float = DEFAULT_TOUCH_FORCE_N,
                              snr_db: float = DEFAULT_SNR_DB) -> Scenario:
    """18-frame single-touch sweep over the 15 mm evaluation grid."""
    sets = [[TouchPhantom(x, y, force)] for x, y in touch_grid_positions()]
    return Scenario(name="touch-grid-18", frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


def build_dataset_scenario(seed: int = 0, snr_db: float = DEFAULT_SNR_DB) -> Scenario:
    """Classification dataset: 225 bend, 315 touch, 500 idle samples.

    Bends: 15 angles evenly spaced over (0, 60] degrees (4, 8, ..., 60; an
    exactly-zero bend is indistinguishable from idle in this simulator and
    would poison the labels), 15 repeats each. Touches: 21 random locations
    (seeded), 15 repeats each. Idle: 500.
    """
    rng = np.random.default_rng([seed, 1080])
    sets = []
    for angle in np.linspace(4.0, 60.0, 15):
        sets.extend([[BendPhantom(float(angle))]] * 15)
    margin = 15.0
    for _ in range(21):
        x = float(rng.uniform(margin, fem.SENSOR_WIDTH_MM - margin))
        y = float(rng.uniform(10.0, fem.SENSOR_HEIGHT_MM - 10.0))
        sets.extend([[TouchPhantom(x, y)]] * 15)
    sets.extend([[]] * 500)
    return Scenario(name="dataset-1080", frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


def build_bend_calib_scenario(seed: int = 0, snr_db: float = DEFAULT_SNR_DB) -> Scenario:
    """90 frames: 15 repeats at each of 0,10,...,50 degrees."""
    sets = []
    for angle in (0.0, 10.0, 20.0, 30.0, 40.0, 50.0):
        sets.extend([[BendPhantom(angle)]] * 15)
    return Scenario(name="bend-calib-90", frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


def build_bend_eval_scenario(seed: int = 1, snr_db: float = DEFAULT_SNR_DB) -> Scenario:
    """20 frames: 5 repeats at each of 20,30,40,50 degrees."""
    sets = []
    for angle in (20.0, 30.0, 40.0, 50.0):
        sets.extend([[BendPhantom(angle)]] * 5)
    return Scenario(name="bend-eval-20", frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


def build_bend_touch_scenario(angle: float, seed: int = 0,
                              snr_db: float = DEFAULT_SNR_DB,
                              two_point: bool = False) -> Scenario:
    """Bend-then-touch sequence: idle baseline, bend onset, touches under bend.

    5 idle frames (global reference capture), 3 bend-only frames (reference
    update with debounce), then touches applied while the bend persists:
    the 18-position grid for single point, or one well-separated pair.
    """
    bend = BendPhantom(angle)
    sets = [[]] * 5 + [[bend]] * 3
    if two_point:
        sets.append([bend, TouchPhantom(45.0, 30.0), TouchPhantom(105.0, 30.0)])
    else:
        sets.extend([[bend, TouchPhantom(x, y)] for x, y in touch_grid_positions()])
    name = f"{'two-point-bend' if two_point else 'bend-touch-grid'}-{angle:g}"
    return Scenario(name=name, frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


def build_robot_demo_scenario(seed: int = 0, snr_db: float = DEFAULT_SNR_DB) -> Scenario:
    """Four scripted interaction cases: idle; slight bend; fingertip touch
    during the slight bend; stronger bend with touch."""
    slight = BendPhantom(5.0)
    bigger = BendPhantom(25.0)
    finger = TouchPhantom(46.0, 35.0, force_n=4.0, radius_mm=5.0)
    sets = ([[]] * 5
            + [[slight]] * 3
            + [[slight, finger]] * 2
            + [[bigger]] * 3
            + [[bigger, TouchPhantom(110.0, 25.0)]] * 2)
    return Scenario(name="robot-demo", frame_schedule=_schedule(sets),
                    noise=NoiseModel(snr_db), seed=seed)


BUILTIN_SCENARIOS = {
    "touch-grid-18": build_touch_grid_scenario,
    "dataset-1080": build_dataset_scenario,
    "bend-calib-90": build_bend_calib_scenario,
    "bend-eval-20": build_bend_eval_scenario,
    "bend-touch-grid-10": lambda seed=0: build_bend_touch_scenario(10.0, seed),
    "bend-touch-grid-20": lambda seed=0: build_bend_touch_scenario(20.0, seed),
    "bend-touch-grid-30": lambda seed=0: build_bend_touch_scenario(30.0, seed),
    "two-point-bend-20": lambda seed=0: build_bend_touch_scenario(20.0, seed, two_point=True),
    "robot-demo": build_robot_demo_scenario,
}


def builtin_scenario(name: str, seed: int = 0) -> Scenario:
    try:
        builder = BUILTIN_SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown builtin scenario {name!r}; "
                       f"available: {sorted(BUILTIN_SCENARIOS)}") from None
    return builder(seed=seed)
