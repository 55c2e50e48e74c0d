from .geometry import (
    FRAME_PX,
    AnnotationSchema, Shape, CorrespondenceMap, SimilarityTransform, BBox,
    bbox_from_shape, reference_transform,
    interocular_distance, rmse_percent, fit_similarity, mean_shape
)
from .features import (
    PATCH_PX, DESCRIPTOR_DIM,
    GrayImage, FeatureVector,
    to_gray, sample_bilinear, sift_at, extract_features, extract_features_batch
)
from .regression import LinearMap, PcaBasis, pca_fit, pca_project, pca_reconstruct, solve_ridge
from .cascade import (
    PerturbationRanges, CascadeConfig, TrainingSample, CascadeModel,
    normalize_image, normalize_sample, perturb_initializations, fit_stage,
    train_sdm, infer, predict, predict_samples
)
from .transductive import (
    TransductiveModel, PseudoLabeledSample,
    train_transductive, transfer_annotations, filter_pseudo
)
from .pipeline import (
    PipelineConfig, EvalReport, TcrLog, DatasetSplits, MatrixCell, ExperimentMatrix,
    run_tcr, evaluate, score, naive_fusion_baseline, naive_labeling, evaluate_transfer, cross_matrix
)
from .cache import ModelCache, samples_digest
from .utils import set_num_threads, get_num_threads, get_chunk_size, ceil_div
