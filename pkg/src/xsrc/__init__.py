"""Cross-scale reservoir computing for gridded spatiotemporal forecasting.

A hierarchy of tiled echo-state reservoirs operates on progressively coarser
regriddings of the same field; coarse layers capture slow coherent dynamics
and pass their non-overlapping predictions down as extra inputs to finer
layers. Includes the single-resolution parallel-reservoir baseline, ridge
readout training, closed-loop forecasting, pooled RMSE evaluation, and a
linear modal decomposition of trained reservoirs.
"""

from .analysis import (
    ActivityStats,
    ModalDecomposition,
    assemble_effective_layer,
    effective_matrix,
    linear_reconstruct,
    max_activity,
    mean_abs_autocorr,
    modal_decomposition,
    remove_top_pcs,
    rmse_map,
    rmse_upto,
)
from .field import (
    GridSeries,
    TileSpec,
    Tiling,
    coarse_grain,
    extract_tile_input,
    load_csv_series,
    load_grid_series,
    make_tiling,
    save_grid_series,
    scatter_tile_outputs,
)
from .hierarchy import (
    ForecastResult,
    HierarchyConfig,
    HierarchyModel,
    LayerConfig,
    build_hierarchy,
    forecast,
    load_model,
    save_model,
    train_hierarchy,
)
from .layer import (
    Layer,
    ParentRoute,
    assemble_input,
    build_layer,
    layer_forecast_step,
    train_layer,
)
from .reservoir import (
    Reservoir,
    ReservoirHyperparams,
    drive,
    init_reservoir,
    readout,
    step,
    train_readout,
)
from .synth import (
    GlobalOscillation,
    LocalChaos,
    SynthSpec,
    TravelingWave,
    gen_multiscale_synthetic,
)

__version__ = "0.1.0"
