"""Local-feature aggregation and exact retrieval over exported conv maps.

Importing the package pins the numeric libraries to a single thread unless
``VLADBENCH_THREADS`` (or an explicit BLAS thread variable) is already set:
threaded reductions reorder float sums and would break bit-reproducibility.
The pinning only works when this package is imported before numpy.
"""

import os as _os

_threads = _os.environ.get("VLADBENCH_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    BadMagicError,
    FormatError,
    NonFinitePayloadError,
    TruncatedFileError,
    UnsupportedVersionError,
    ZeroPositivesError,
)
from .features import (  # noqa: E402
    DescriptorSet,
    FeatureMap,
    extract_descriptors,
    l2_normalize,
    l2_normalize_rows,
    normalize_descriptors,
    read_cfmp,
    write_cfmp,
)
from .dataset import (  # noqa: E402
    DatasetManifest,
    ImageRecord,
    load_ground_truth_groups,
    load_manifest,
    save_ground_truth_groups,
    save_manifest,
    synth_dataset,
)
from .codebook import (  # noqa: E402
    Codebook,
    assign,
    assign_many,
    load_codebook,
    pairwise_sqdist,
    save_codebook,
    train_codebook,
)
from .vlad import (  # noqa: E402
    VladDescriptor,
    concat_multiscale,
    encode_vlad,
    global_l2,
    intra_normalize,
    load_vlad,
    save_vlad,
    ssr_normalize,
)
from .projection import (  # noqa: E402
    Projection,
    fit_pca_whiten,
    load_projection,
    project,
    project_many,
    save_projection,
)
from .retrieval import (  # noqa: E402
    RankedList,
    RetrievalIndex,
    build_index,
    index_from_vlads,
    load_descriptor_matrix,
    query,
    query_by_id,
    save_descriptor_matrix,
)
from .evaluation import (  # noqa: E402
    EvaluationResult,
    GroundTruth,
    average_precision,
    evaluate_index,
    load_holidays_ground_truth,
    load_oxford_ground_truth,
    mean_ap,
)
from .pipeline import (  # noqa: E402
    PipelineConfig,
    SweepReport,
    SweepRow,
    run_retrieval_config,
    sweep,
)
from .visualization import (  # noqa: E402
    PatchRef,
    PatchSource,
    correspondence_mosaic,
    load_patch_sources,
    patch_clusters,
    patch_rect,
)
from .ppm import read_ppm, write_ppm  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BadMagicError",
    "Codebook",
    "DatasetManifest",
    "DescriptorSet",
    "EvaluationResult",
    "FeatureMap",
    "FormatError",
    "GroundTruth",
    "ImageRecord",
    "NonFinitePayloadError",
    "PatchRef",
    "PatchSource",
    "PipelineConfig",
    "Projection",
    "RankedList",
    "RetrievalIndex",
    "SweepReport",
    "SweepRow",
    "TruncatedFileError",
    "UnsupportedVersionError",
    "VladDescriptor",
    "ZeroPositivesError",
    "assign",
    "assign_many",
    "average_precision",
    "build_index",
    "concat_multiscale",
    "correspondence_mosaic",
    "encode_vlad",
    "evaluate_index",
    "extract_descriptors",
    "fit_pca_whiten",
    "global_l2",
    "index_from_vlads",
    "intra_normalize",
    "l2_normalize",
    "l2_normalize_rows",
    "load_codebook",
    "load_descriptor_matrix",
    "load_holidays_ground_truth",
    "load_ground_truth_groups",
    "load_manifest",
    "load_oxford_ground_truth",
    "load_patch_sources",
    "load_projection",
    "load_vlad",
    "mean_ap",
    "normalize_descriptors",
    "pairwise_sqdist",
    "patch_clusters",
    "patch_rect",
    "project",
    "project_many",
    "query",
    "query_by_id",
    "read_cfmp",
    "read_ppm",
    "run_retrieval_config",
    "save_codebook",
    "save_descriptor_matrix",
    "save_ground_truth_groups",
    "save_manifest",
    "save_projection",
    "save_vlad",
    "ssr_normalize",
    "sweep",
    "synth_dataset",
    "train_codebook",
    "write_cfmp",
    "write_ppm",
]
