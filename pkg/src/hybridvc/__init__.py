"""Two-stream video classification downstream of CNN features.

Peephole LSTMs model frame order, a fusion network with l21/l11-regularized
fusion weights combines pooled spatial and motion features, and late fusion
of their score tables gives the final prediction.
"""

from .ensemble import FusionWeights, ScoreTable, average_fuse, cross_validate_weights, weighted_fuse
from .features import FeatureSequence, SynthSpec, VideoSample, average_pool, load_dataset, synthesize
from .fusion import FusionHyper, FusionNet, fusion_forward, prox_l21_l11, train_fusion
from .lstm import LstmStack, LstmTrainConfig, lstm_bptt, lstm_forward, train_lstm
from .metrics import accuracy, average_precision, mean_ap

__version__ = "0.1.0"
