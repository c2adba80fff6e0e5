"""Cross ensemble knowledge distillation at desk scale.

Two small CNNs are trained jointly on differently mixed versions of the
same image pairs and supervise each other through cross distillation and a
row-wise minimum logit ensemble.
"""

__version__ = "0.1.0"
