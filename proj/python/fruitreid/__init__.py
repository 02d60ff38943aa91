"""Fruit re-identification on colored point clouds."""

from ._fruitreid import (
    ConfigError,
    DivergenceError,
    EmptyInputError,
    Error,
    IoError,
    ParseError,
    ShapeError,
    ValidationError,
    f1_scores,
    generate_pair,
    greedy_assign,
    load_ply,
    matching_confusion,
    mean_shift,
    nn_match,
    panoptic_quality,
    parse_grid,
    positional_encoding,
    run_cli,
    save_ply,
)

__version__ = "0.1.0"
