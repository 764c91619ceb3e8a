"""Transferable adversarial examples via style-mixed gradient averaging.

The package builds everything it needs from scratch on a desktop: a
synthetic glyph dataset, a small classifier zoo, an embedding-conditioned
style network, a family of transform-averaged sign-gradient attacks and an
evaluation harness that measures surrogate-to-target transfer.
"""

from .core import (AttackBudget, BudgetViolation, ClassifierHandle,
                   ConfigError, InputError, LabeledExample, MomentumState,
                   StyleAdvError, TrainingFailure, UnsupportedCapability,
                   check_budget, l1_normalize, momentum_update,
                   sign_step_and_clip, state_dict_digest)
from .transforms import (AdmixConfig, DimConfig, SimConfig, SpectrumConfig,
                         TimConfig, dct2, dim_transform, idct2, sim_copies,
                         smoothing_kernel, spectrum_transform, tim_smooth)
from .data import (CLASS_NAMES, ShapesDataset, load_image_folder,
                   make_shapes_dataset, make_style_corpus, save_image_folder)
from .style import (ConditionalInstanceNorm2d, FinetuneConfig, StmConfig,
                    StyleNetwork, finetune_style_network, load_style_network,
                    mix_and_perturb, pretrain_style_network, psnr,
                    sample_embedding, save_style_network, stylize)
from .zoo import (DEFAULT_ZOO_SPEC, ModelZoo, ZooMember, build_arch, load_zoo,
                  save_zoo, train_classifier, train_toy_classifiers)
from .attacks import (ATTACK_NAMES, AttackSpec, AttackTrace, make_attack_spec,
                      make_ensemble, run_attack, run_stm, spec_from_dict,
                      spec_hash, spec_to_dict)
from .defenses import (bit_depth_reduction, defense_names, get_defense,
                       jpeg_defense, register_defense)
from .evaluation import (EvaluationReport, ExperimentConfig,
                         attack_success_rate, derive_stream,
                         generate_adversaries, run_experiment_matrix,
                         run_strategy_ablation, stylized_accuracy)

__all__ = [name for name in dir() if not name.startswith("_")]
