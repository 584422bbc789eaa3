"""eiclab: a desk-scale video frame prediction laboratory.

A frame extrapolator is trained against ground truth plus a cycle guidance
signal: a frozen, pre-trained frame interpolator re-synthesizes the previous
frame from (I_{t-2}, prediction), and the L1 gap to the true previous frame
is added to the training loss.  Evaluation covers single-step PSNR/SSIM and
autoregressive multi-horizon rollout.
"""

__version__ = "0.1.0"

from . import engine  # noqa: F401
from .engine import Tensor, no_grad  # noqa: F401
