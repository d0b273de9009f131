"""Desk-scale lab for random layerwise token dropping.

Library surface: drop schedules and plans (schedule), LayerToken
budgets and the LayerToken LR schedule (budget), a small reverse-mode
tensor engine with differentiable gather/combine (tensor), toy
transformer stacks (model), and the training/experiment harness
(trainer).  The ``ltd-lab`` CLI fronts all of it.
"""

__version__ = "0.1.0"

from ._alloc import tune_glibc_allocator as _tune

_tune()

from .budget import (BudgetError, DecayShape, LayerTokenLedger, LRAxis,
                     LRConfig, build_ledger, cumulative_layertokens,
                     layertokens_per_iter, lr_at, lr_curve,
                     lt_warmup_iterations, saving_fraction)
from .corpus import Corpus, CorpusKind, make_corpus
from .model import (BypassConfig, BypassMetric, ModelError, TokenLossEMA,
                    TransformerConfig, TransformerModel, lm_loss,
                    make_mlm_batch, mlm_loss, update_token_loss_ema)
from .schedule import (DropPlan, DropSchedule, ScheduleError, ScheduleMode,
                       full_plan, iterations_for_tokens, kept_length,
                       kept_length_array, plan_iteration, sample_drop_plan)
from .tensor import Parameter, Tensor, TensorError, combine_rows, gather_rows
