"""End-to-end forecasting on synthetic data, compared with the HA baseline.

Uses a small grid and a short training budget so the demo runs in well
under a minute; see the README for the full-scale pipeline via the CLI.
"""

from roadflow.data import SyntheticSpec, generate_synthetic, split_and_window, split_rows
from roadflow.graphs import GraphBuildParams, build_graph_elements
from roadflow.model import ModelConfig
from roadflow.train_eval import TrainConfig, compute_metrics, historical_average, run_experiment

spec = SyntheticSpec(grid_rows=4, grid_cols=4, weeks=2, seed=0)
links, series = generate_synthetic(spec)
elements = build_graph_elements(
    links,
    GraphBuildParams(direction_centers=[0.0, 0.25, 0.5, 0.75], distance_centers=[0.2, 0.4, 0.6, 0.8]),
)
splits = split_and_window(series, t_hist=12, t_horizon=12)
print("windows per split:", [len(s) for s in splits])

pred = historical_average(series, split_rows(series)["train"], splits[2])
ha = compute_metrics(pred, splits[2].target)
print(f"HA baseline   MAE {ha.mae:.3f}  RMSE {ha.rmse:.3f}")

cfg = ModelConfig(channels=(8, 8), spatial_block_kind="stacked", seed=0)
tc = TrainConfig(lr=1e-2, epochs=4, patience=2, max_batches_per_epoch=20, seed=0)
report, state, model = run_experiment(elements, *splits, cfg, tc, label="stacked")
print(f"stacked model MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  ({state.epochs_run} epochs)")
for step, metrics in report.per_step.items():
    print(f"  {step * 5:d}-min horizon: MAE {metrics['mae']:.3f}  RMSE {metrics['rmse']:.3f}")
