"""BEV imitation-learning planner toolkit.

Modules:
    core        grid geometry, vehicle/trajectory data model
    kinematics  discrete bicycle-model rollout with analytic jacobians
    raster_diff differentiable vehicle rasterizer (oriented Gaussian kernels)
    losses      imitation + rasterized task losses with analytic gradients
    world       scenario world model and the scenario file format
    scene       BEV channel rendering and task-mask rendering
    policy      CNN/GRU planner network, training loop, parameter files
    augment     random and feedback trajectory synthesizers
    sim         closed-loop executor, rule checkers, scripted expert
    metrics     comfort score and pass-rate aggregation
    postplan    corridor bounds + piecewise-jerk QP gatekeeper
    dataset     on-disk sample storage (index + checksummed blobs)
    config      pipeline configuration and model-variant presets
    cli         command-line pipeline (generate/augment/train/evaluate)
"""

__version__ = "0.1.0"
