"""abxmil: a desk-scale end-to-end multiple-instance-learning lab.

Synthetic bags with known discriminative/noisy roles, a float64 autodiff
engine, attention-pooling aggregators (single-head, multi-head with
correlation-based refinement, mean, global query attention), multi-scale
random instance sampling, a joint trainer, and the analysis instruments
(attention sparsity, optimization risk, modulation factor, bootstrap CIs).
"""

__version__ = "0.1.0"
