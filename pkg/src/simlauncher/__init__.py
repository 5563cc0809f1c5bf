"""SimLauncher: demonstration-bootstrapped online RL on twin toy tasks."""

__version__ = "0.1.0"
