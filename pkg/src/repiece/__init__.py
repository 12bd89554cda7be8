"""Square jigsaw solving: permutation classification with an adversarial
reconstruction side task, plus the classical boundary pipeline that
labels the training shuffles.
"""

from .errors import ConfigError, DataError, NumericalError, RepieceError
from .grid import (GridSpec, Permutation, PermutationSet, PieceBatch,
                   apply_permutation, compose, generate_permutation_set, hamming,
                   identity_permutation, invert, load_permutation_set, reassemble,
                   save_permutation_set, split_image)
from .compat import (CompatMatrix, ReferenceLabel, build_compat_matrix,
                     greedy_select_pairs, mst_assemble, read_reference_csv,
                     reference_label, strip_psnr, strip_ssim, write_reference_csv)
from .warp import FlowField, flow_from_permutation, warp
from .networks import (Classifier, Discriminator, Encoder, GeneratorTail,
                       build_models, combine_features, encode, param_count)
from .losses import (BoundaryLossConfig, LossWeights, adversarial_losses,
                     boundary_loss, cross_entropy, focal_loss, jigsaw_loss,
                     kl_divergence, total_loss)
from .checkpoint import load_models, read_checkpoint, save_checkpoint
from .data import (DatasetManifest, ManifestEntry, ShuffledSample, build_manifest,
                   load_image, load_manifest, make_shuffled_sample, preprocess,
                   shuffle_seed, write_manifest)
from .train import TrainConfig, TrainState, fit, load_train_config, train_step
from .evaluate import (EvalReport, evaluate_manifest, neighbor_accuracy,
                       reorganization_accuracy, run_ablation, solve, time_solver)

__version__ = "0.1.0"
