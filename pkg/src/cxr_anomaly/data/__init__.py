from .annotations import (
    CSV_HEADER,
    group_boxes,
    parse_annotations,
    rasterize_mask,
    scale_box,
    serialize_annotations,
)
from .scans import load_and_normalize_scan, load_png_record, minmax_normalize
from .splits import class_mask, make_balanced_subset, make_pairs, make_splits, pair_label
from .store import Dataset, load_dataset, read_pairs, write_dataset, write_pairs
from .synthetic import (
    SyntheticSample,
    class_pattern,
    generate_image,
    generate_synthetic_dataset,
    synthetic_splits,
)
from .types import NO_FINDING, AnnotationBox, ImageRecord, PairSample, SyntheticSpec

__all__ = [
    "CSV_HEADER",
    "NO_FINDING",
    "AnnotationBox",
    "Dataset",
    "ImageRecord",
    "PairSample",
    "SyntheticSample",
    "SyntheticSpec",
    "class_mask",
    "class_pattern",
    "generate_image",
    "generate_synthetic_dataset",
    "group_boxes",
    "load_and_normalize_scan",
    "load_dataset",
    "load_png_record",
    "make_balanced_subset",
    "make_pairs",
    "make_splits",
    "minmax_normalize",
    "pair_label",
    "parse_annotations",
    "rasterize_mask",
    "read_pairs",
    "scale_box",
    "serialize_annotations",
    "synthetic_splits",
    "write_dataset",
    "write_pairs",
]
