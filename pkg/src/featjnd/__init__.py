"""Task-aligned tolerance maps for deep visual features.

Learn a per-element perturbation map that is as large as possible while a
frozen downstream head barely notices, then use it for matched-distortion
evaluation, attribution comparison, and token-wise quantization with an
exact noise budget.
"""

from .discrepancy import (
    DiscrepancyConfig,
    HeadOutputs,
    d_cls,
    d_det,
    d_ins,
    discrepancy,
    kl_temperature,
    smooth_l1,
)
from .errors import (
    BundleQualityError,
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    FeatJndError,
    FormatError,
    MissingArtifactError,
    PersistenceError,
    ShapeMismatchError,
    ValidationError,
)
from .estimator import (
    EstimatorConfig,
    JndEstimator,
    init_estimator,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    DistortionSpec,
    SweepResult,
    SweepRow,
    alpha_sweep,
    apply_distortion,
    matched_comparison,
    matched_sweep,
    quant_comparison,
)
from .features import (
    FeaturePyramid,
    FeatureTensor,
    JndMap,
    l2_norm,
    load_feature,
    load_pyramid,
    save_feature,
    save_pyramid,
)
from .metrics import (
    DistortionReading,
    cosine,
    nmse,
    nrmse,
    orthogonal_cosine_prediction,
    pyramid_nrmse,
)
from .quantization import (
    BudgetSpec,
    StepMap,
    ToleranceMap,
    default_floor,
    permute_baseline,
    quant_error_moment,
    quantize,
    realized_budget,
    solve_lambda,
    solve_step_map,
    step_map,
    tolerance_map,
    uniform_baseline,
)
from .attribution import attribution_delta, integrated_attribution
from .taskbench import TaskBundle, make_bundle, make_cls_bundle, make_pyramid_bundle
from .training import TrainConfig, featjnd_loss, magnitude, train_loop, train_step

__version__ = "0.1.0"
