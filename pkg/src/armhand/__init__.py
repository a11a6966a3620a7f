"""Arm-hand rotation estimation from keypoint sequences.

Subpackages cover the full pipeline: a float64 autodiff tensor engine
(`tensor`), articulated kinematics and projection (`kinematics`), synthetic
correlated motion data and preprocessing (`datapipe`), the three generator
architectures plus discriminator (`model`), the adversarial training loop
(`train`), metrics and the ablation harness (`evaluate`), and the operator
CLI (`cli`).
"""

__version__ = "0.1.0"
