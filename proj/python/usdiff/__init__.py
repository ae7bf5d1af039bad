"""Desk-scale in-context diffusion."""

from usdiff._core import (
    ConfigError,
    ContractError,
    IoError,
    NoiseSchedule,
    NumericError,
    StepPlan,
    annotate,
    build_schedule,
    ddim_step,
    forward_sample,
    frechet_proxy,
    gen_scene,
    predict_x0,
    resolve_config,
    rmse,
    run_sandbox,
    sample,
    select_steps,
    time_embed,
    train,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "IoError",
    "NoiseSchedule",
    "NumericError",
    "StepPlan",
    "annotate",
    "build_schedule",
    "ddim_step",
    "forward_sample",
    "frechet_proxy",
    "gen_scene",
    "predict_x0",
    "resolve_config",
    "rmse",
    "run_sandbox",
    "sample",
    "select_steps",
    "time_embed",
    "train",
]
