"""Label tree embeddings with kernel SVM classification."""
from .data import Dataset, SampleSet, Snippet, load_dataset, save_dataset
from .embedding import LTEModel, closeness, embed_dataset, embed_dataset_out_of_fold, train_lte
from .errors import DataError, LteError, NumericalError, SchemaError
from .evaluation import compute_metrics, synth_hierarchy_dataset
from .experiment import ChannelConfig, ExperimentConfig, run_experiment
from .forest import ForestConfig, RandomForest, train_forest
from .kernels import fusion_gram, gram
from .label_tree import LabelTree, brute_force_partition, build_label_tree, spectral_partition
from .svm import predict_ovo, train_ovo

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig", "DataError", "Dataset", "ExperimentConfig", "ForestConfig", "LTEModel",
    "LabelTree", "LteError", "NumericalError", "RandomForest", "SampleSet", "SchemaError", "Snippet",
    "brute_force_partition", "build_label_tree", "closeness", "compute_metrics", "embed_dataset",
    "embed_dataset_out_of_fold", "fusion_gram", "gram", "load_dataset", "predict_ovo", "run_experiment",
    "save_dataset", "spectral_partition", "synth_hierarchy_dataset", "train_forest", "train_lte", "train_ovo",
]
