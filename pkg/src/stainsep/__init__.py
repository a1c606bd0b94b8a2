"""Physics-based stain decomposition and normalization for histology images."""

from .imagery import (
    EPS_LOG,
    ImageDecodeError,
    OpticalDensityImage,
    RawImage,
    denoise,
    from_optical_density,
    load_image,
    render_beer_lambert,
    save_image,
    tile,
    to_optical_density,
    untile,
)
from .proxcore import (
    ProxThresholds,
    prox_density_column,
    prox_spectrum_column,
    safe_step_size,
)
from .unroll import (
    LearnableParams,
    SolverConfig,
    StainModel,
    decompose,
    default_params,
    effective_rank,
    objective,
    unroll_step,
)
from .head import HeadWeights, default_head_weights, normalize_render, project_density
from .baselines import (
    ForegroundError,
    StainBasis,
    macenko_estimate,
    macenko_normalize,
    reinhard_normalize,
    sparse_nmf_decompose,
)
from .train import (
    Classifier,
    DomainSpec,
    SyntheticDataset,
    TrainConfig,
    evaluate_accuracy,
    fd_gradient,
    make_synthetic_domains,
    model_loss,
    train_loop,
)

__version__ = "0.1.0"
