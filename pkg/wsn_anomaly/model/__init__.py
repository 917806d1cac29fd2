from .backbone import Backbone, BackboneStream, backbone_forward
from .cross_retention import CrossRetention
from .detector import AnomalyDetector
from .discriminator import AnomalyBuffer, DualGraphDiscriminator, sample_episode
from .retention import MultiScaleRetention
