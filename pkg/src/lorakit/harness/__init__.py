"""Config parsing, deterministic runs, sweeps and the self-check suite."""
