"""Multi-weather image restoration with histogram transformer blocks, in numpy.

Submodules:

* ``tensor``   float64 tensors with a tape-based reverse-mode autodiff
* ``blocks``   attention, histogram attention, fusion and feed-forward blocks
* ``model``    the encoder-decoder network and its checkpoint file
* ``weather``  haze / rain / snow synthesis
* ``losses``   training objective, PSNR and SSIM
* ``train``    Adam, the schedule, the training loop and evaluation
"""
from .model import NetConfig, build, forward, restore
from .train import TrainConfig, Trainer, evaluate

__version__ = "0.1.0"
__all__ = ["NetConfig", "TrainConfig", "Trainer", "build", "evaluate", "forward", "restore"]
