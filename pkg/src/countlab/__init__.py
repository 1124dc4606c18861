"""countlab: a desk-scale laboratory for visual counting under label shift."""

from .boxes import Box, iou
from .mcd import (
    DatasetSplit,
    DistributionStats,
    SplitStrategy,
    apply_strategy,
    bhattacharyya,
    carve_validation,
    count_histogram,
    replay_split,
    split_report,
)
from .metrics import (
    EvalReport,
    GroundingItem,
    accuracy_rmse,
    average_precision,
    ground_p,
    per_label_accuracy,
    rect_union_intersection,
)
from .scenegen import (
    CountingTriplet,
    Dataset,
    Instance,
    Question,
    RegionProposal,
    SceneSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_question,
    propose_regions,
    save_dataset,
)
from .scn import (
    LossBreakdown,
    ModelConfig,
    RegionScoreSet,
    init_parameters,
    predict,
    round_half_away,
)
from .training import TrainerConfig, train

__version__ = "0.1.0"
