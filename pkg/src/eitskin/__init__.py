"""Dual-modal EIT tactile sensing: simulation, reconstruction, classification.

A finite-element forward model stands in for the physical sensor; on top of
it sit one-step regularized reconstruction, touch localization, a
touch/bend/idle classifier, bending-angle regression, and the
adaptive-reference per-frame pipeline.
"""

from .fem import (
    Mesh,
    ElectrodeLayout,
    MeasurementProtocol,
    ConductivityField,
    MeasurementFrame,
    SensitivityMatrix,
    RegularizerMatrix,
    LinearSystem,
    MeshError,
    SolverError,
    build_rect_mesh,
    place_electrodes,
    build_protocol,
    assemble_system,
    solve_forward,
    homogeneous_frame,
    compute_jacobian,
    noser_regularizer,
)
from .reconstruction import (
    Reconstructor,
    ReconstructionImage,
    TouchReport,
    build_reconstructor,
    reconstruct,
    threshold_nonnegative,
    normalize_and_binarize,
    localize_touches,
)
from .phantoms import (
    TouchPhantom,
    BendPhantom,
    NoiseModel,
    Scenario,
    FrameLog,
    SensorModel,
    touch_delta,
    bend_delta,
    synthesize_frame,
    run_scenario,
    builtin_scenario,
)
from .bend import BendModel, anova_f_scores, select_k_best, fit_linear, predict_angle
from .classifier import (
    Network,
    TrainConfig,
    init_network,
    forward_pass,
    train,
    gradient_check,
    baseline_classify,
)
from .pipeline import (
    Pipeline,
    PipelineConfig,
    ReferenceState,
    FrameResult,
    capture_global_reference,
    process_frame,
    reset_touch_reference,
)

__version__ = "0.1.0"
