"""Reconstruction attacks: logit inversion against distillation schemes, gradient baselines."""

from pli_lab.attack.dump import ReconstructionDump, save_png
from pli_lab.attack.gradient import (
    GradAttackConfig,
    GradInversion,
    infer_labels,
    matching_loss,
    recover_last_layer_input,
    row_estimates,
)
from pli_lab.attack.optimal import OptimalLogits, optimal_logits, quality_q
from pli_lab.attack.pli import (
    AttackConfig,
    PLIAttack,
    PLIResult,
    encode_pair,
    finetune_targets,
    reconstruct,
    select_best,
    tempered,
    train_inversion_public,
)
from pli_lab.attack.priors import (
    PriorBank,
    UnsharpMask,
    estimate_prior_average,
    estimate_prior_translated,
    identity_translator,
    translator_for,
)

__all__ = [
    "AttackConfig", "GradAttackConfig", "GradInversion", "OptimalLogits", "PLIAttack", "PLIResult",
    "PriorBank", "ReconstructionDump", "UnsharpMask", "encode_pair", "estimate_prior_average",
    "estimate_prior_translated", "finetune_targets", "identity_translator", "infer_labels",
    "matching_loss", "optimal_logits", "quality_q", "reconstruct", "recover_last_layer_input",
    "row_estimates", "save_png", "select_best", "tempered", "train_inversion_public", "translator_for",
]
