"""csi2image: through-wall image synthesis from WiFi CSI spectrograms."""

from .dataset import (
    NormStats,
    PairedSample,
    SkipSample,
    SpectrogramWindow,
    WindowedDataset,
    compute_norm_stats,
    preprocess_image,
    sample_window,
)
from .harness import AblationPlan, export_video, run_ablation
from .ingest import (
    CsiPacket,
    DataError,
    ImageFrame,
    PacketImagePair,
    SplitAssignment,
    amplitude,
    load_frames,
    pair_nearest,
    parse_csi_log,
    split_contiguous,
    trim_sequence,
)
from .latent import (
    GaussianPosterior,
    LatentSample,
    LossBreakdown,
    SubsetPosterior,
    kl_standard_normal,
    mopoe_loss,
    poe_combine,
    powerset_posteriors,
    recon_nll,
    reparameterize,
)
from .metrics import (
    FeatureSet,
    MetricsReport,
    VariantMetrics,
    evaluate_variant,
    fid,
    psnr,
    rmse,
    ssim,
)
from .networks import (
    ModelConfig,
    MultimodalVae,
    TrainedModel,
    aggregate,
    apply_variant,
    infer_image,
    temporal_encode,
)
from .synthetic import SyntheticSpec, make_synthetic, write_raw_capture
from .training import (
    RunRecord,
    TrainConfig,
    TrainingAborted,
    grid_search,
    train_one_run,
    train_protocol,
)

__version__ = "0.1.0"
