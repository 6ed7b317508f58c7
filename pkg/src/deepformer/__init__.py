"""Deep post-LN encoder-decoder transformers in numpy, with ADMIN initialisation."""

from .architecture import ModelConfig, Transformer
from .admin import OmegaProfile, admin_initialize, fold_omega
from .config import RunConfig, load_config
from .corpus import TaskSpec, gen_task
from .evalmetrics import bleu_corpus, paired_bootstrap
from .training import RAdam, Schedule, lr_at_step, train_loop

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Transformer", "OmegaProfile", "admin_initialize", "fold_omega",
    "RunConfig", "load_config", "TaskSpec", "gen_task", "bleu_corpus", "paired_bootstrap",
    "RAdam", "Schedule", "lr_at_step", "train_loop",
]
