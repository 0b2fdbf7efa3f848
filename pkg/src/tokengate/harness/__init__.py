from .data import Dataset, SyntheticTask, generate_synthetic, label_tokens
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .train import (DivergenceError, EvalResult, TrainConfig, TrainMetrics, evaluate,
                    export_mask_histogram, mask_histogram, polarization_fraction, train)
