"""UV position-map face toolkit.

Registered face meshes encoded as UV position maps, visibility-weighted
similarity self-alignment, occlusion modeling, mesh-structured losses with
analytic gradients, evaluation metrics, and a desk-scale deformation
fitting demonstrator.
"""

from .align import (
    DegenerateConfigurationError,
    LandmarkCorrespondence,
    estimate_scale,
    estimate_similarity,
    landmark_weights,
    reconstruct_final,
    self_align,
    weighted_centroids,
)
from .fitting import (
    FitConfig,
    FitResult,
    PoseRanges,
    SynthSample,
    check_gradients,
    fit_sample,
    smooth_deformation,
    standard_assets,
    synth_dataset,
)
from .losses import (
    LossConfig,
    LossReport,
    bce_attention_loss,
    build_uv_edge_set,
    edge_length_loss,
    normal_vector_loss,
    total_loss,
    weighted_position_loss,
)
from .mesh import (
    FaceMesh,
    MeshError,
    TemplateSpec,
    build_mean_template,
    facet_normals,
    read_obj,
    vertex_normals,
    write_obj,
)
from .metrics import (
    MetricSample,
    gimbal_fix_filter,
    mae_pose,
    nme_bbox,
    nme_interocular,
    yaw_binned_report,
)
from .pose import (
    EulerAngles,
    PoseTransform,
    apply_pose,
    compose_shape,
    euler_to_rotation,
    project,
    rotation_to_euler,
)
from .uvmap import (
    MappingError,
    UVMapping,
    UVPositionMap,
    WeightMask,
    build_weight_mask,
    compute_uv_mapping,
    decode_uv_map,
    encode_uv_map,
    read_uvpm,
    write_uvpm,
)
from .visibility import (
    OcclusionSpec,
    attend_features,
    estimate_visibility,
    read_pgm,
    render_face_binary_mask,
    synthesize_occlusion,
    write_pgm,
)

__version__ = "0.1.0"
