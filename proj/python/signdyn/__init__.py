"""Training-dynamics laboratory for sign descent on two-layer attention."""

from signdyn._core import (  # noqa: F401
    ConfigError,
    DataConfig,
    Dataset,
    ModelConfig,
    OptimizerKind,
    OptimizerSpec,
    Params,
    Patch,
    RegimeError,
    Sample,
    __version__,
    empirical_loss,
    finite_difference_gradients,
    forward,
    generate_dataset,
    gradients,
    init_params,
    load_dataset,
    mean_value,
    noise_norm_stats,
    parse_config_file,
    run_train,
    run_verify,
    save_dataset,
    supports_disjoint,
    test_loss,
    train,
)
