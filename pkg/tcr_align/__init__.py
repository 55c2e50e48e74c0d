from . import core, io
from .core import (
    AnnotationSchema, Shape, CorrespondenceMap, SimilarityTransform, BBox,
    CascadeConfig, PerturbationRanges, TrainingSample, CascadeModel,
    TransductiveModel, PseudoLabeledSample,
    PipelineConfig, EvalReport, TcrLog, DatasetSplits, ExperimentMatrix, ModelCache,
    train_sdm, predict, predict_samples,
    train_transductive, transfer_annotations, filter_pseudo,
    run_tcr, evaluate, naive_fusion_baseline, evaluate_transfer, cross_matrix,
    set_num_threads, get_num_threads
)
from .errors import TcrError, DataError
from .io import RunConfig, load_dataset, load_splits, load_correspondence, save_model, load_model
from .synth import SynthConfig, SynthCorpus, generate_corpus, write_corpus
from .utils import bench, calc_diff

