"""cashewedge: desk-scale int8 edge inference for leaf-disease detection,
with benchmarking and variable-rate spray planning."""

from .errors import (
    BadMagicError,
    CalibrationError,
    CashewEdgeError,
    ContractError,
    ConversionError,
    DomainError,
    ManifestMismatchError,
    ModelFormatError,
    TrainingError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .evalbench import (
    BenchReport,
    BudgetCheck,
    ConfusionMatrix,
    benchmark,
    budget_check,
    classification_metrics,
    confusion_matrix,
    evaluate_model,
    export_features,
)
from .graph import (
    ArenaPlan,
    Executor,
    LayerSpec,
    ModelGraph,
    build_cashew_net,
    count_params,
    execute,
    load_model,
    plan_arena,
    save_model,
)
from .kernels import (
    ConvAttrs,
    conv2d,
    depthwise_conv2d,
    dropout_inference,
    fully_connected,
    global_avg_pool,
    relu6,
    residual_add,
    softmax,
)
from .quantizer import (
    AgreementReport,
    CalibrationStats,
    calibrate,
    compare_models,
    quantize_model,
)
from .spray import (
    DetectionRecord,
    FieldGrid,
    SprayPlan,
    SprayPolicy,
    aggregate,
    compare_uniform,
    grid_from_bounds,
    plan_spray,
)
from .synth import ImageDataset, SynthSpec, gen_synth, load_dataset, read_ppm, write_ppm
from .tensors import (
    FixedPointMultiplier,
    QuantParams,
    Tensor,
    compute_quant_params,
    dequantize,
    quantize,
    requantize,
    to_fixed_point,
)
from .trainer import (
    TrainConfig,
    TrainReport,
    clip_gradients,
    extract_features,
    one_cycle_lr,
    train_head,
)

__version__ = "0.1.0"
