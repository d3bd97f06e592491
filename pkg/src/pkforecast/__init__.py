"""Glucose forecasting with a learnable pharmacokinetic dose encoder."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    DoseSeries,
    PatientRecord,
    PreprocessConfig,
    StaticFeatures,
    TimeGrid,
    WindowSample,
    forward_fill,
    ingest_events_csv,
    load_dataset,
    make_windows,
    read_aligned_csv,
    save_dataset,
    split_train_test,
    write_aligned_csv,
)
from .encoder import (
    ConcentrationFeature,
    PkParams,
    concentration_at,
    concentration_grad_k,
    encode_doses,
    encode_record,
    stacking_matrix,
)
from .models import (
    Checkpoint,
    FeatureConfig,
    FeatureTensor,
    ForecastModel,
    build_model,
    featurize,
)
from .synth import SynthConfig, SynthPatient, bolus_controller, generate, schedule_meals
from .training import (
    AdamState,
    TrainConfig,
    TrialSet,
    adam_step,
    huber_loss,
    run_trials,
    train_global,
    train_local,
    validation_select,
)
from .evaluation import (
    CounterfactualSpec,
    EvalReport,
    compare_global_local,
    counterfactual_forecasts,
    critical_mask,
    evaluate_model,
    mae,
    paired_t_test_one_sided,
    rmse,
    rolling_forecast,
    summarize_trials,
)
