"""Work counters for the identification and unlearning stages.

One unit is one forward-and-backward pass through the adapter: a single
per-sample gradient, one bias-functional gradient, or one Hessian-vector
product over the training set.
"""

from dataclasses import asdict, dataclass, field


@dataclass
class StageCost:
    grad_evals: int = 0
    cg_iters: int = 0


@dataclass
class CostCounters:
    identify: StageCost = field(default_factory=StageCost)
    unlearn: StageCost = field(default_factory=StageCost)
    n_c: int = 0
    n_u: int = 0
    n: int = 0
    E: int = 0

    @property
    def grad_evals(self):
        return self.identify.grad_evals + self.unlearn.grad_evals

    @property
    def cg_iters_total(self):
        return self.identify.cg_iters + self.unlearn.cg_iters

    def to_dict(self):
        return asdict(self)
