"""Ground-truth benchmark for saliency methods on synthetic lesion images.

Modules:

* :mod:`~lesionbench.synthgen` - Perlin or file backgrounds with circular lesions
* :mod:`~lesionbench.netcore` - numpy convolutional network with an activation record
* :mod:`~lesionbench.trainer` - training loop, early stopping, best-of-N selection
* :mod:`~lesionbench.saliency` - eight attribution methods as backward rules
* :mod:`~lesionbench.xmetrics` - ROC-AUC, average precision and PREC99 against ground truth
* :mod:`~lesionbench.harness` - experiment pipeline, figures and the command line
"""
__version__ = "0.1.0"
