"""Element-removal ablation and the K-hop Chebyshev comparison, tiny scale."""

from roadflow.data import SyntheticSpec, generate_synthetic, split_and_window
from roadflow.graphs import GraphBuildParams, build_graph_elements
from roadflow.model import ModelConfig
from roadflow.train_eval import TrainConfig, run_ablation, run_khop_study

links, series = generate_synthetic(SyntheticSpec(grid_rows=3, grid_cols=3, weeks=1, seed=0))
elements = build_graph_elements(
    links,
    GraphBuildParams(direction_centers=[0.0, 0.25, 0.5, 0.75], distance_centers=[0.2, 0.4, 0.6, 0.8]),
)
splits = split_and_window(series, 12, 12)

cfg = ModelConfig(channels=(4, 4), spatial_block_kind="stacked", seed=0)
tc = TrainConfig(lr=1e-2, epochs=2, patience=1, max_batches_per_epoch=10, seed=0)

print("== removed-component ablation ==")
for row in run_ablation(elements, splits, cfg, tc, removals=("direction_hybrid", "distance")):
    print(f"{row.label:30s} MAE {row.mae:.3f}  MAPE {row.mape:.2f}%  RMSE {row.rmse:.3f}")

print("== distance-only ChebNet by polynomial order ==")
for row in run_khop_study(elements, splits, cfg, tc, k_values=(1, 2, 3)):
    print(f"{row.label:30s} RMSE {row.rmse:.3f}")
