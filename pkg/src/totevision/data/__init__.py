from .datasets import (
    DatasetConfig,
    IdentSample,
    build_datasets,
    defect_split,
    identification_split,
    load_defect,
    load_identification,
    load_manifest,
    load_segmentation,
    segmentation_split,
)
from .defects import DEFECT_LABELS, MULTI_PICK, NOMINAL, PACKAGE_DEFECT, PickSample, inject_defect, make_pick_sample
from .picks import PickTriplet, QueryBundle, generate_pick_triplet, reference_view
from .render import ObjectIdentity, Pose, make_catalog
from .rle import rle_decode, rle_encode
from .scenes import SceneSample, SceneSpec, generate_scene, regime_spec
