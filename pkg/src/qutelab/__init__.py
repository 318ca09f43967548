"""Single-pass early-view ensembles for tiny CNNs, with calibration
metrics, corruption benchmarks, and accuracy-drop monitoring."""

__version__ = "0.1.0"

from .rng import Rng, derive_seed
from .tensor import NumericError, Param, Tensor, adam_step, lr_schedule, no_grad, zero_grad
from .graph import (BlockSpec, CheckpointError, ExitSpec, GraphError, NetworkGraph,
                    build_graph, flops_estimate, forward_all_exits, load_checkpoint,
                    param_count, save_checkpoint)
from .data import (CorruptionSpec, Dataset, DataError, SEVERITY_TABLES, augment_batch,
                   build_cid_dataset, corrupt, corrupt_dataset, load_idx, save_idx,
                   synth_dataset, synth_ood_dataset, to_model_input)
from .qute import (EnsemblePrediction, LossWeights, TrainConfig, TrainLog,
                   attach_qute_heads, ensemble_predict, ev_weight_transfer, qute_loss,
                   qute_predict, strip_for_inference, train, val_split_indices)
from .baselines import (EnsembleOfGraphs, apply_temperature, base_graph, deep_predict,
                        ee_ensemble_graph, ee_predict, fit_temperature, mcd_predict,
                        train_base, train_deep, train_ee_ensemble)
from .metrics import (CalibrationReport, accuracy, auprc, auroc, brier, confidence,
                      ece, f1_weighted, nll, nll_binary_sum)
from .monitor import (ConfusionCounts, DriftResult, IdStats, WindowState,
                      accuracy_drop_auprc, calibrate_id_stats, concat_datasets,
                      detect_events, failure_tasks, stream_series, sweep_thresholds,
                      window_push)
from .experiment import (ConfigError, ExperimentConfig, RunManifest, config_hash,
                         emit_report, parse_config, parse_config_dict, run_experiment,
                         train_hash)
