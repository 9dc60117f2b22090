"""dpaudit: contrast model utility against reconstruction risk under DP-SGD.

The toolkit trains desk-scale models with differentially private SGD,
computes theoretical reconstruction-robustness bounds for worst-case and
relaxed adversaries, runs an analytic gradient-inversion attack simulating a
malicious federated server, and assembles three-tier risk profiles.
"""

from .accountant import (OVERFLOW, PrivacyParams, PrivacySpent, RdpCurve,
                         calibrate_sigma, compose, rdp_step, step_curve,
                         to_epsilon_delta)
from .config import ExperimentConfig, default_config, load_config
from .datagen import (Dataset, DatasetSpec, gen_binary_imbalanced,
                      gen_multiclass_powerlaw, gen_segmentation, generate,
                      load_dataset, normalize, save_dataset)
from .evalrecon import (CumulativeCurve, MatchResult, SsimConfig,
                        cumulative_curve, dark_filter, match, ssim,
                        success_rate)
from .imprint import (AttackScenario, GradientPacket, ImprintBlock,
                      ReconstructionSet, detect_imprint, init_imprint,
                      recover, run_campaign, surgery_prepend)
from .models import ModelSpec, forward, init_weights
from .numerics import Rng, Tensor, contains_non_finite, gaussian, matmul
from .pipeline import run_pipeline
from .rero import (ReroBound, ReroParams, ThreatModel, bound_curve,
                   mc_privacy_loss_epsilon, mc_reconstruction_game,
                   relaxed_bound, worst_case_bound)
from .trainer import (Augment, EarlyStop, MetricsReport, TrainConfig,
                      TrainResult, clip_and_noise, dice, mcc,
                      optimizer_step, per_sample_gradients, train,
                      welch_t_test)

__version__ = "0.1.0"

__all__ = [
    "OVERFLOW", "PrivacyParams", "PrivacySpent", "RdpCurve", "calibrate_sigma",
    "compose", "rdp_step", "step_curve", "to_epsilon_delta",
    "ExperimentConfig", "default_config", "load_config",
    "Dataset", "DatasetSpec", "gen_binary_imbalanced", "gen_multiclass_powerlaw",
    "gen_segmentation", "generate", "load_dataset", "normalize", "save_dataset",
    "CumulativeCurve", "MatchResult", "SsimConfig", "cumulative_curve",
    "dark_filter", "match", "ssim", "success_rate",
    "AttackScenario", "GradientPacket", "ImprintBlock", "ReconstructionSet",
    "detect_imprint", "init_imprint", "recover", "run_campaign", "surgery_prepend",
    "ModelSpec", "forward", "init_weights",
    "Rng", "Tensor", "contains_non_finite", "gaussian", "matmul",
    "run_pipeline",
    "ReroBound", "ReroParams", "ThreatModel", "bound_curve",
    "mc_privacy_loss_epsilon", "mc_reconstruction_game", "relaxed_bound",
    "worst_case_bound",
    "Augment", "EarlyStop", "MetricsReport", "TrainConfig", "TrainResult",
    "clip_and_noise", "dice", "mcc", "optimizer_step", "per_sample_gradients",
    "train", "welch_t_test",
    "__version__",
]
