"""Self-distillation pretraining that uses the temporal views of a satellite scene as augmentation."""

__version__ = "0.1.0"
