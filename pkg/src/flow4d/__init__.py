"""flow4d: synthetic 4D flow MRI, unsupervised vessel segmentation, and
physics-constrained velocity reconstruction."""

from .volume import (
    AcquisitionMeta,
    BundleFormatError,
    ComplexChannel,
    FlowBundle,
    MaskVolume,
    VelocityField,
    phase_to_velocity,
    raw_velocity,
    velocity_to_phase,
    wrap,
)
from .io import (
    export_vtk,
    load_bundle,
    load_mask,
    load_velocity,
    save_bundle,
    save_mask,
    save_velocity,
)
from .synth import (
    GeometryConfig,
    GroundTruth,
    SweepConfig,
    VortexParams,
    add_noise,
    analytic_poiseuille,
    analytic_unsteady_vortex,
    apply_psf,
    generate_sweeps,
    synthesize_signal,
)
from .segmentation import SegmentationError, SegmentationParams, segment
from .reconstruction import (
    ReconstructionError,
    ReconstructionParams,
    reconstruct,
)
from .metrics import (
    divergence_residuals,
    overlap_scores,
    surface_distance,
    velocity_agreement,
)

__version__ = "0.1.0"
