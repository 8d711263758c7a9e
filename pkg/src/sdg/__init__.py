"""Sequence diffusion for temporal link prediction on dynamic graphs."""

from .diffusion import SequenceTensor, forward_marginal, reverse_step, sample_loop
from .events import (AdjacencyIndex, DatasetSplit, Event, EventLog,
                     HistoryBatch, HistorySequence, build_index,
                     chronological_split, history_batch, load_events,
                     load_negatives_file, recent_neighbors, repeat_ratio,
                     sample_negatives)
from .evaluation import (EvalReport, evaluate_pointwise, evaluate_ranking,
                         export_embeddings, perturb_history)
from .model import (ContextTensor, ForwardTrainOutput, SDGConfig, SDGModel,
                    TargetSequence, build_target, generate_and_rank)
from .schedule import NoiseSchedule, make_schedule, posterior_coefficients
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"
