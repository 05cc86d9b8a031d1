"""Cross-domain knowledge distillation for time series classifiers.

A frozen, domain-adapted teacher is compressed into a small 1D-CNN student
using a feature-domain discriminator (teacher vs student features) and a
data-domain discriminator whose confidence weights per-sample logit
distillation.
"""
from .data import (DomainDataset, SyntheticShiftSpec, batch_iterator, generate_synthetic,
                   load_dataset, load_ucihar, normalize, save_dataset, ucihar_scenario)
from .errors import ConfigError, DivergenceError
from .evaluate import MetricsReport, evaluate, evaluate_target, export_features, macro_f1
from .losses import (AlphaSchedule, LossBreakdown, alpha_at_epoch, joint_weight, loss_ce,
                     loss_dc, loss_dis, loss_gen, loss_jkd, soften, total_student_loss)
from .nets import (BackboneConfig, build_discriminator, build_student, build_teacher,
                   complexity_report, count_flops, count_parameters, gradient_reversal)
from .train import (VARIANTS, DistillConfig, TeacherConfig, distill_unikd, pretrain_teacher_dann,
                    run_ablation, train_source_only)

__version__ = "0.1.0"
