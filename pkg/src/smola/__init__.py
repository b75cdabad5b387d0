"""Soft mixtures of zero-initialized low-rank experts on frozen linear layers."""
from .baselines import (GatedMoeFfn, LoraMixture, PlainLora, gated_moe_forward,
                        lora_apply, lora_mixture_forward)
from .core import (ConfigError, RoutingWeights, SmolaBlock, SmolaConfig, SmolaGradients,
                   backward, compute_routing, expert_apply, forward, init_block)
from .diagnostics import (CostReport, HeatmapReport, SpectrumReport, bench_sweep, bench_throughput,
                          count_costs, effective_rank, phi_gram)
from .estimator import OmniSmolaRegressor
from .numkit import Rng, ShapeError
from .omni import OmniAdapter, TokenBatch, init_omni, omni_backward, omni_forward
from .trainer import SyntheticTask, TrainState, make_mixture, multitask_loss, train

__version__ = "0.1.0"
