"""Local-frame equivariant neural network interatomic potential."""

__version__ = "0.1.0"

from .geometry import AtomicSystem, build_neighbor_list
from .network import (
    ModelConfig,
    ModelState,
    Prediction,
    build_cache,
    init_state,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .data import (
    Dataset,
    LabeledFrame,
    fcc_supercell,
    lj_oracle,
    load_extxyz,
    make_lj_argon_dataset,
    save_extxyz,
    split,
)
from .training import (
    DynamicWeights,
    TrainConfig,
    TrainResult,
    TrainingError,
    evaluate,
    load_model_state,
    train,
)
from .dynamics import (
    MDError,
    MDReport,
    MDState,
    lj_provider,
    maxwell_boltzmann_velocities,
    model_provider,
    run_nve,
)
from .benchmark import BenchResult, run_bench, supercell
from .estimator import FramePotentialRegressor

__all__ = [
    "__version__",
    "AtomicSystem",
    "LabeledFrame",
    "build_neighbor_list",
    "build_cache",
    "ModelConfig",
    "ModelState",
    "Prediction",
    "init_state",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "Dataset",
    "load_extxyz",
    "save_extxyz",
    "split",
    "lj_oracle",
    "fcc_supercell",
    "make_lj_argon_dataset",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "DynamicWeights",
    "train",
    "evaluate",
    "load_model_state",
    "MDState",
    "MDReport",
    "MDError",
    "run_nve",
    "maxwell_boltzmann_velocities",
    "model_provider",
    "lj_provider",
    "BenchResult",
    "run_bench",
    "supercell",
    "FramePotentialRegressor",
]
