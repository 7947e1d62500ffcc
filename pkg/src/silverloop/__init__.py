"""Silver-label distillation toolkit.

A rule-based multi-task sentence labeler (the teacher), a probabilistic
neural surrogate trained to match it (the student), and an
uncertainty-driven annotation loop that lifts label quality above the
teacher with a small amount of human effort.
"""

__version__ = "0.1.0"
