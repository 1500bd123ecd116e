import numpy as np

from gmvlab.gradcheck import CHECKS, run_gradchecks
from gmvlab.reader import ModelConfig, ReaderModel


def test_gradchecks_pass_on_one_seed():
    results = run_gradchecks(seeds=(5,), points=2)
    assert len(results) == 2 * len(CHECKS)
    assert all(r.passed for r in results), [r.report.lines() for r in results if not r.passed]


def test_gradcheck_detects_a_wrong_gradient():
    # a deliberately corrupted analytic gradient must be flagged
    from gmvlab.nnkit import grad_check
    model = ReaderModel(ModelConfig(buckets=32), seed=0)
    b = model.buckets(np.arange(16).reshape(2, 8))
    labels = np.array([0.0, 1.0])
    _, grads = model.router_objective(b, labels)
    net = model.blocks["router"]
    report = grad_check(lambda: model.router_objective(b, labels, with_grads=False)[0],
                        {"theta": grads["router"].dense * 1.01}, {"theta": net.theta})
    assert not report.passed
