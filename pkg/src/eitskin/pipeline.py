"""Adaptive-reference per-frame orchestration.

Every frame is first reconstructed against the global reference (captured
undeformed) and classified. Confirmed bends update the touch reference to
the current frame's voltages, so the second reconstruction isolates touch
from deformation; touch centroids and the bending angle are then read off
their respective images. The state machine is strictly sequential and
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import bend as bend_mod
from . import classifier as cl
from . import reconstruction as rec
from .fem import MeasurementFrame

MODALITY_IDLE = "idle"
MODALITY_TOUCH = "touch"
MODALITY_BEND = "bend"
MODALITY_TOUCH_BEND = "touch+bend"


@dataclass
class ReferenceState:
    """Global and adaptive voltage baselines plus update bookkeeping."""

    global_ref: np.ndarray
    touch_ref: np.ndarray
    touch_ref_frame_id: int = -1   # -1: initial copy of the global reference
    last_bend_angle: float = 0.0
    pending_count: int = 0         # consecutive frames past the update threshold


@dataclass(frozen=True)
class PipelineConfig:
    bend_update_threshold: float = 1.0  # degrees
    bend_confirm_frames: int = 2
    classifier: str = "baseline"        # baseline | network

    def __post_init__(self):
        if self.bend_update_threshold <= 0:
            raise ValueError("bend_update_threshold must be positive")
        if self.bend_confirm_frames < 1:
            raise ValueError("bend_confirm_frames must be >= 1")


@dataclass(frozen=True)
class FrameResult:
    frame_id: int
    modality: str
    bend_angle: float | None
    touches: rec.TouchReport
    pre_image: rec.ReconstructionImage
    touch_image: rec.ReconstructionImage
    bend_image: rec.ReconstructionImage
    labels: tuple  # (pre-image class, touch-image class) as ints


class Pipeline:
    """Holds the immutable processing components; state passes through."""

    def __init__(self, reconstructor: rec.Reconstructor,
                 bend_model: bend_mod.BendModel | None = None,
                 network: cl.Network | None = None,
                 config: PipelineConfig = PipelineConfig()):
        self.reconstructor = reconstructor
        self.bend_model = bend_model
        self.network = network
        self.config = config
        if config.classifier == "network" and network is None:
            raise ValueError("network classifier selected but no network given")

    def classify(self, image: rec.ReconstructionImage) -> int:
        raster = cl.preprocess(image)
        if self.config.classifier == "network":
            probs = cl.forward_pass(self.network, raster, training=False)
            return int(np.argmax(probs))
        return cl.baseline_classify(raster)


def capture_global_reference(frames) -> ReferenceState:
    """Average idle frames into the global baseline; touch ref starts equal."""
    frames = list(frames)
    if not frames:
        raise ValueError("at least one idle frame required")
    stack = np.stack([f.voltages for f in frames])
    global_ref = stack.mean(axis=0)
    return ReferenceState(global_ref=global_ref, touch_ref=global_ref.copy())


def reset_touch_reference(state: ReferenceState) -> ReferenceState:
    """Revert to the global baseline (e.g. after returning to flat)."""
    state.touch_ref = state.global_ref.copy()
    state.touch_ref_frame_id = -1
    state.last_bend_angle = 0.0
    state.pending_count = 0
    return state


def process_frame(pipeline: Pipeline, state: ReferenceState,
                  frame: MeasurementFrame) -> FrameResult:
    """Run the per-frame sequence; mutates `state` (single-owner)."""
    cfg = pipeline.config

    # (a) pre-reconstruction against the global reference
    pre_image = rec.reconstruct(pipeline.reconstructor, frame,
                                state.global_ref, reference_kind="global")
    # (b) first classification
    label1 = pipeline.classify(pre_image)

    # (c) bend handling: predict angle, debounce, update the touch reference
    angle = None
    captured_this_frame = False
    prev_touch_ref = None
    if label1 == cl.LABELS["bend"] and pipeline.bend_model is not None:
        angle = bend_mod.predict_angle(pipeline.bend_model, frame, state.global_ref)
        if abs(angle - state.last_bend_angle) > cfg.bend_update_threshold:
            state.pending_count += 1
            if state.pending_count >= cfg.bend_confirm_frames:
                prev_touch_ref = (state.touch_ref.copy(),
                                  state.touch_ref_frame_id,
                                  state.last_bend_angle)
                state.touch_ref = frame.voltages.copy()
                state.touch_ref_frame_id = frame.frame_id
                state.last_bend_angle = angle
                state.pending_count = 0
                captured_this_frame = True
        else:
            state.pending_count = 0
    else:
        state.pending_count = 0

    # a touch active during capture would poison the reference; against the
    # freshly captured reference the frame is a self-difference (all zero),
    # so probe it against the previous reference and roll back on touch
    if captured_this_frame:
        probe = rec.reconstruct(pipeline.reconstructor, frame,
                                prev_touch_ref[0], reference_kind="touch")
        if pipeline.classify(probe) == cl.LABELS["touch"]:
            state.touch_ref, state.touch_ref_frame_id, state.last_bend_angle = prev_touch_ref

    # (d) touch reconstruction against the adaptive reference
    touch_image = rec.reconstruct(pipeline.reconstructor, frame,
                                  state.touch_ref, reference_kind="touch")
    label2 = pipeline.classify(touch_image)

    # (e)-(g) modality assembly
    modality = None
    touches = rec.TouchReport(points=())
    bend_angle = None
    if label2 == cl.LABELS["touch"]:
        touches = rec.localize_touches(touch_image)
        if state.last_bend_angle > cfg.bend_update_threshold:
            modality = MODALITY_TOUCH_BEND
            bend_angle = angle if angle is not None else state.last_bend_angle
        else:
            modality = MODALITY_TOUCH
    bend_image = rec.threshold_nonnegative(pre_image)
    if label1 == cl.LABELS["bend"] and label2 != cl.LABELS["touch"]:
        modality = MODALITY_BEND
        bend_angle = angle
    if label1 == cl.LABELS["idle"] and label2 == cl.LABELS["idle"]:
        modality = MODALITY_IDLE
        bend_angle = None
    if modality is None:
        # uncovered label combinations fall back to the pre-image class
        modality = {cl.LABELS["idle"]: MODALITY_IDLE,
                    cl.LABELS["touch"]: MODALITY_TOUCH,
                    cl.LABELS["bend"]: MODALITY_BEND}[label1]
        if modality == MODALITY_BEND:
            bend_angle = angle

    return FrameResult(frame_id=frame.frame_id, modality=modality,
                       bend_angle=bend_angle, touches=touches,
                       pre_image=pre_image, touch_image=touch_image,
                       bend_image=bend_image, labels=(label1, label2))


def run_log(pipeline: Pipeline, state: ReferenceState, frames) -> list:
    """Process frames in order; returns the FrameResult list."""
    return [process_frame(pipeline, state, f) for f in frames]


def result_to_line(result: FrameResult) -> str:
    """One display record per frame: modality, touch position (cm), angle."""
    parts = [f"frame={result.frame_id}", f"modality={result.modality}"]
    if result.touches.count == 0:
        parts.append("touch=none")
    else:
        for p in result.touches.points:
            parts.append(f"touch=({p.x_mm / 10.0:.1f}, {p.y_mm / 10.0:.1f})")
    if result.bend_angle is None:
        parts.append("angle=none")
    else:
        parts.append(f"angle={result.bend_angle:.2f}°")
    return " ".join(parts)
