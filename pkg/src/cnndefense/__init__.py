"""Self-verifying CNN inference with data recovery.

A CNN prediction is checked against per-class reference profiles built from
natural data; inputs whose evidence is inconsistent with the predicted class
(adversarial patches on images, perturbed audio commands) are flagged after
a single inference and then repaired, either by neighbor-interpolating the
offending image region or by suppressing the hijacked activations and
re-running the classifier head.
"""

from .engine import (ClassLogit, InferenceCounter, LayerSpec, ModelGraph, Neuron,
                     conv2d_forward, forward, forward_from, input_gradient)
from .modelio import load_model, model_fingerprint, read_model, save_model, write_model
from .interpret import AmConfig, Box, activation_maximization, cam, localize_primary_region
from .dsp import MfccConfig, binarize_spectrum, fft2d, ifft2d, mfcc
from .metrics import jaccard_inconsistency, pearson_inconsistency
from .profiles import (AudioClassProfile, ImageClassProfile, ProfileStore,
                       build_audio_profile, build_image_profile, build_store,
                       load_profiles, save_profiles)
from .defense import (DefendConfig, DetectionReport, RecoveryOutcome, defend,
                      detect_audio, detect_image, recover_audio, recover_image)
from .attacks import PatchSpec, apply_patch, bim_audio, fgsm_audio, optimize_patch
from .complexity import (CostBreakdown, flops_cam, flops_fft_jsc, flops_inference,
                         flops_interpolation, flops_pcc, pipeline_cost, vgg16_table)
from .evalkit import AttackConfig, EvalReport, evaluate, load_dataset, roc_auc, save_dataset

__version__ = "0.1.0"
