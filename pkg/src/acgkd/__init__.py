"""Data-free knowledge distillation for graph classifiers on a small numpy autodiff core."""
from .graphs import GraphBatch, GraphRecord, load_dataset, split_train_test
from .models import GnnModel, ModelSpec, train_teacher
from .generation import CurriculumSchedule, GenConfig, generate_batch, generate_dataset
from .distillation import DistillConfig, distill, evaluate

__all__ = ["GraphBatch", "GraphRecord", "load_dataset", "split_train_test", "GnnModel", "ModelSpec",
           "train_teacher", "CurriculumSchedule", "GenConfig", "generate_batch", "generate_dataset",
           "DistillConfig", "distill", "evaluate"]
