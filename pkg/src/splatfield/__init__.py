"""Training-free feature fields for 3D Gaussian Splatting.

Rasterizes pre-trained Gaussian scenes while recording every Gaussian's
blending weight, back-projects 2D feature maps into per-Gaussian features,
and serves 3D/2D segmentation, affordance transfer, and identity-encoding
queries over the result.
"""

from .backprojection import BackprojectionConfig, backproject, prune_cloud
from .errors import (
    CapacityError,
    DivergenceError,
    EmptySceneError,
    ParseError,
    SplatError,
    ValidationError,
)
from .identity import (
    IdentityCodebook,
    LabeledView,
    classify_features,
    classify_pixels,
    encode_scene,
    grouping_miou,
    orthogonal_codes,
    train_contrastive,
)
from .query_engine import (
    AffordanceSource,
    QuerySpec,
    SegmentationResult,
    delete,
    extract,
    knn_transfer,
    mask_metrics,
    segment_2d,
    segment_3d,
    similarity,
)
from .rasterizer import (
    RenderOptions,
    RenderOutput,
    WeightSink,
    accumulate_weights,
    oracle_render,
    render,
    render_features,
)
from .scene_io import (
    FeatureMap,
    FeatureStore,
    PromptBank,
    SceneBundle,
    load_cameras,
    load_feature_map,
    load_feature_store,
    load_ply,
    load_prompt_bank,
    save_feature_map,
    save_feature_store,
    save_ply,
)
from .splat_core import Camera, GaussianCloud, ProjectedGaussian, evaluate_sh, project_gaussian

__version__ = "0.1.0"
