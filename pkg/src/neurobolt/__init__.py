"""EEG-to-fMRI sequence-to-one translation toolkit."""

from .signals import (
    EEGRecording,
    ROITimeSeries,
    ScanPair,
    SplitSpec,
    WindowSample,
    align_windows,
    load_scan_bundle,
    normalize_amplitude,
    normalize_roi,
    resample,
    save_scan_bundle,
    split_inter,
    split_intra,
)
from .synth import (
    HRFKernel,
    SynthConfig,
    canonical_hrf,
    default_synth_config,
    gen_dataset,
    gen_eeg,
    gen_envelopes,
    gen_roi,
    gen_scan,
)
from .patches import PatchGrid, patch
from .spectral import SpectralPyramid, linear_attention, multiscale_spectra
from .model import (
    NeuroBolt,
    NeuroBoltConfig,
    build_model,
    paper_geometry,
    predict,
    predict_batch,
    tiny_geometry,
)
from .training import (
    TrainConfig,
    TrainResult,
    grad_check,
    load_checkpoint,
    lr_at,
    mse_loss,
    save_checkpoint,
    train,
)
from .evaluation import (
    EvalReport,
    baseline_mean,
    baseline_ridge,
    evaluate_scan,
    pearson,
    pearson_or_flag,
)

__version__ = "0.1.0"
