"""
MetaStab - test-time adapted full-frame video stabilization
===========================================================

A sliding-window synthesis network is meta-trained on synthetic shaky/stable
pairs so that a few self-supervised gradient steps on a new video are enough
to adapt it before stabilizing that video. Everything runs on numpy with a
small reverse-mode autodiff engine (metastab.autodiff).
"""

__version__ = '0.1.0'
