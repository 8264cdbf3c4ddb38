"""Noise-to-signal-ratio regularization and adversarial robustness tooling for 1-D signal classifiers."""
from .attacks import AttackConfig, attack_batch, pgd_attack, sap_attack, white_noise_attack
from .classifiers import (AffineForm, ClassifierSpec, build_beat_cnn, build_masked_cnn, build_mlp,
                          forward, input_gradient, linearize_at, load_checkpoint, save_checkpoint)
from .estimator import RobustSignalClassifier
from .objectives import (AdvConfig, JacobConfig, NsrConfig, adv_loss, epsilon_schedule,
                         jacob_loss, jacobian_regularizer, nsr_loss, nsr_regularizer)
from .robustness_eval import (RobustnessCurve, RobustnessSummary, acc_robust, evaluate_curve,
                              f1_robust, macro_f1, normalized_auc, render_report)

__version__ = "0.1.0"
