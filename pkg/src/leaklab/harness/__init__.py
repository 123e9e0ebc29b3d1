"""Pipeline orchestration, configuration, checkpoints and the command line."""
