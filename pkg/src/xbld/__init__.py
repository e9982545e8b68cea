"""Distance-aware explanation-based learning (XBL-D).

Decoy dataset construction, CNN presets, Grad-CAM, the distance-aware
explanation loss with RRR / RRR-G baselines, and Activation Precision /
Recall evaluation.
"""

__version__ = "0.1.0"
