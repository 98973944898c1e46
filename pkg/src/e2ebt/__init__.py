"""End-to-end back-translation training with differentiable sampled sentences.

Subpackages/modules:

* ``kernels``   — compiled/numpy row-wise kernels (backend picked at import)
* ``autodiff``  — minimal reverse-mode autodiff over dense arrays
* ``reparam``   — categorical straight-through reparameterization + baselines
* ``transformer`` — tiny encoder-decoder translation models and LMs
* ``objectives`` — cross-entropy, reconstruction, KL-to-prior, composite loss
* ``training``  — iterative back-translation trainer and pre-training loops
* ``data``      — corpora, synthetic language pairs, BLEU
* ``bench``     — reparameterization micro-benchmark
"""

__version__ = "0.1.0"
