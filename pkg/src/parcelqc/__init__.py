"""Quality control and evaluation for fine-grained brain parcellations."""

__version__ = "0.1.0"

from .nifti_io import (  # noqa: E402
    GeometryMismatchError,
    LabelMap,
    NiftiError,
    Volume3D,
    VolumeGeometry,
    geometry_match,
    read_labelmap,
    read_volume,
    write_volume,
)
from .volume_core import box_filter, pearson_correlation, region_medians  # noqa: E402
from .synth_qc import QcScoreSet, alignment_score, batch_scores, synthesize_reference  # noqa: E402
from .gmm_threshold import GmmFit, classify_scores, fit_gmm2, rejection_threshold  # noqa: E402
from .seg_metrics import (  # noqa: E402
    GroupMap,
    ProtocolMap,
    StructureMetrics,
    aggregate_groups,
    boundary_voxels,
    dice,
    evaluate_pair,
    remap_protocol,
    sd95,
)
from .cohort_stats import (  # noqa: E402
    CohortSummary,
    SubjectRecord,
    cohort_summary,
    stratified_split,
    wilcoxon_signed_rank,
)
from .phantom import PhantomSpec, generate_phantom, inject_lesions, inject_misalignment  # noqa: E402
