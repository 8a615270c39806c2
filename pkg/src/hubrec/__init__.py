"""Audio k-NN recommender, hubness attacks and the Mutual Proximity defence."""

from .audio_io import AudioClip, central_segment, ingest, load_wav, resample, write_wav
from .attack import (
    AttackConfig,
    AttackOutcome,
    AttackVariant,
    attack_song,
    attack_step,
    loss_and_grad,
    run_attack,
    select_target,
)
from .catalogue import Catalogue, add_song, build, load, recommend
from .evaluation import (
    ExperimentReport,
    grid_search,
    hubness_before_after,
    posthoc_defence,
    render_table,
    run_experiment,
)
from .features import MfccConfig, MfccMatrix, mfcc_forward, mfcc_vjp
from .gaussian import GaussianModel, fit_gaussian, gaussian_vjp, skl, skl_grad
from .hubness import (
    HubnessReport,
    classify,
    k_occurrence,
    retrieval_accuracy,
    single_song_occurrence,
    snr_db,
)
from .mutual_proximity import (
    DistanceKind,
    DistanceMatrix,
    bt,
    mp_rescale,
    mp_rescale_incremental,
    mp_surrogate,
    mp_surrogate_grad,
)
from .synth import SynthConfig, write_corpus

__version__ = "0.1.0"
