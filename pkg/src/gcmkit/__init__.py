"""gcmkit: a self-contained adversarial-robustness toolkit.

A tape-based float32 autodiff engine, a small model zoo (MLP, CNN), the
gradient-concealment defense layer, white-box attacks (FGSM, PGD, C&W),
and an evaluation harness computing clean accuracy and attack robustness.
"""

from .autodiff import (GradientBundle, Node, Tape, Tensor, backward,
                       finite_difference_gradient)
from .attacks import (AdvExample, AttackConfig, CwParams, NormConstraint, INF,
                      cw, fgsm, pgd, project, run_attack)
from .data import Dataset, generate_desk_data, load_dataset, save_dataset, synthesize_dataset
from .errors import (CheckpointError, ConfigError, DataFormatError, GcmkitError,
                     NumericError, ShapeMismatchError, TapeError)
from .gcm import (GcmConfig, GcmPlacement, cascade, gcm_apply, gcm_grad_multiplier,
                  gcm_layer_count)
from .metrics import (EvalReport, SampleRecord, accuracy, adversarial_accuracy,
                      attack_robustness, evaluate, write_report)
from .models import (Model, TrainConfig, build_model, checkpoint_roundtrip, forward_eval,
                     grad_wrt_input, load_checkpoint, predict, save_checkpoint, train)
from .signmap import (SignMap, per_pixel_sign_entropy, render_sign_map, sign_entropy,
                      sign_map, write_pgm, write_ppm)

__version__ = "0.1.0"
