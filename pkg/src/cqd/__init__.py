"""Cross-quality distillation on a small numpy autodiff engine.

Modules: ``tensor`` (autodiff), ``optim`` (SGD), ``nets`` (CNNs and
checkpoints), ``degrade`` (paired degradations), ``data`` (synthetic shapes
and image directories), ``distill`` (training methods), ``analysis``
(input-gradient saliency), ``harness`` (experiments) and ``cli``.
"""

__version__ = "0.1.0"
