from .checkpoint import CheckpointError, dumps_checkpoint, load_checkpoint, save_checkpoint
from .training import TrainSpec, TrainingDiverged, load_train_config, loss_and_grad, train_toy_model
from .wiring import INDUCTION_HEAD, PREV_TOKEN_HEAD, wire_induction_model, wired_config
