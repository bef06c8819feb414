"""snopt-kit: second-order training for small Neural ODE models.

The package is organised around one backward pass: a generic ODE solver
(`odesolve`), an analytic MLP vector field with hand-rolled VJPs
(`vector_field`), the first-order adjoint sweep (`adjoint`), the dense and
low-rank curvature sweeps (`curvature`), time-integrated Kronecker factors
(`kfac`), the eigenbasis-regularized update rule plus first-order baselines
(`optimizer`), and a feedback policy for the integration bound (`horizon`).
`data`, `oracle`, `trainer`, and `cli` supply fixtures, finite-difference
references, the training loop, and the command line.
"""

__version__ = "0.1.0"
