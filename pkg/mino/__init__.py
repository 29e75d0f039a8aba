"""
Mesh-informed neural operators for flow-matching generative models in
function spaces: Gaussian-process base measures on arbitrary point sets, a
GNO + cross-attention velocity model, OT-coupled flow-matching training, ODE
sample generation and a discretization-consistent metric suite.
"""

__version__ = "1.0.0"
