"""Configuration, checkpoints, experiment protocols and the command line.

Submodules are imported explicitly (``moka.harness.cli`` etc.) to keep
``moka.training`` free to use the checkpoint writer without a cycle.
"""
