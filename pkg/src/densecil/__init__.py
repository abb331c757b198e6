"""densecil: a deterministic, desk-scale class-incremental learner.

The package grows a tiny vision transformer one task expert at a time,
reusing old-task features through a task-attention block, and ships the
analysis tools (attention-group decomposition, exact MAC accounting) used
to study the model.
"""

__version__ = "0.1.0"
