"""Learned SE(3) traversal references for quadrotor MPC through moving narrow gates."""

__version__ = "0.1.0"
