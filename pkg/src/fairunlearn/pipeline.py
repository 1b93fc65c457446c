"""Stage functions behind the command line: train, identify, unlearn, evaluate, gap-check, grid.

Every stage reads what it needs from the output directory and writes its
own files there, so stages can be run one at a time or chained by
``run_all``.  Nothing here depends on wall-clock time or thread count.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from .config import RunConfig, write_resolved
from .costs import CostCounters, StageCost
from .errors import FairUnlearnError
from .fairness import BiasSpec, EvalReport, evaluate
from .influence import (CGConfig, cache_fingerprint, influence_scores, precompute_influence_vector,
                        write_influence_csv)
from .maskopt import (LAMBDA_GRID, Lambdas, MaskOptConfig, optimize_mask, read_selected_ids,
                      select_unlearn_set, write_mask_csv)
from .recmodel import (ModelState, TrainConfig, load_model, mean_loss_and_grad, save_model,
                       train_backbone)
from .reports import decile_report, read_cost_json, write_cost_json, write_decile_csv, write_metrics_csv
from .unlearn import (compute_delta, gap_report, retrain_oracle, unlearn_summary, write_gap_csv,
                      write_unlearn_json)

log = logging.getLogger(__name__)

STAGES = ("train", "identify", "unlearn", "evaluate", "gap-check")
EXIT_CODES = {"config": 2, "load": 3, "train": 4, "identify": 5, "unlearn": 6,
              "evaluate": 7, "gap-check": 8, "grid": 9}

BACKBONE = "backbone.ckpt"
DEBIASED = "debiased.ckpt"
RETRAINED = "retrained.ckpt"


class StageFailure(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self):
        return EXIT_CODES.get(self.stage, 1)


@dataclass
class Context:
    cfg: RunConfig
    log: ds.InteractionLog
    groups: ds.GroupAssignment
    split: ds.SplitDataset
    pop: ds.PopularityTable
    item_emb: np.ndarray | None
    out: Path
    threads: int = 1

    @property
    def item_count(self):
        return self.log.item_count


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.train.epochs, learning_rate=cfg.train.lr, seed=cfg.train.seed,
                       reg=cfg.model.reg, dim=cfg.model.dim, tol=cfg.train.tol)


def cg_config(cfg: RunConfig) -> CGConfig:
    return CGConfig(cfg.cg.damping, cfg.cg.tol, cfg.cg.max_iter)


def lambdas_of(cfg: RunConfig) -> Lambdas:
    return Lambdas(cfg.mask.fair, cfg.mask.acc, cfg.mask.spa)


def mask_config(cfg: RunConfig) -> MaskOptConfig:
    return MaskOptConfig(learning_rate=cfg.mask.lr, iterations=cfg.mask.iterations,
                         seed=cfg.mask.seed)


def prepare(cfg: RunConfig, threads=1) -> Context:
    d = cfg.data
    interactions, groups = ds.load_interactions(d.interactions, d.groups or None)
    emb = ds.load_item_embeddings(d.item_emb, interactions.item_ids) if d.item_emb else None
    if emb is not None and emb.shape[1] != cfg.model.dim:
        raise ValueError(f"item embeddings have width {emb.shape[1]}, model.dim is {cfg.model.dim}")
    split = ds.temporal_split(interactions, d.periods, d.train_periods, d.valid_periods,
                              d.test_periods, cfg.model.max_history)
    pop = ds.compute_popularity(split.train, interactions.item_count, cfg.bias.count_mode,
                                cfg.bias.value_mode)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return Context(cfg, interactions, groups, split, pop, emb, out, threads)


def bias_spec(ctx: Context) -> BiasSpec:
    b = ctx.cfg.bias
    groups = ctx.groups if b.kind in ("attribute", "combined") else None
    pop = ctx.pop if b.kind in ("popularity", "combined") else None
    return BiasSpec(b.kind, ctx.split.valid, pop=pop, groups=groups, alpha=b.alpha)


def _eval(ctx: Context, model, samples) -> EvalReport:
    e = ctx.cfg.eval
    return evaluate(model, samples, e.ks, pop=ctx.pop, groups=ctx.groups, tau=e.tau,
                    fair_pop=e.fair_pop, fair_attr=e.fair_attr, exclude_history=e.exclude_history)


# -- stages ----------------------------------------------------------------

def stage_train(ctx: Context) -> ModelState:
    """Train the backbone, or load ``data.checkpoint`` when one is given."""
    if ctx.cfg.data.checkpoint:
        model = load_model(ctx.cfg.data.checkpoint)
        if model.item_count != ctx.item_count:
            raise ValueError(f"checkpoint has {model.item_count} items, data has {ctx.item_count}")
    else:
        model = train_backbone(ctx.split.train, ctx.item_count, train_config(ctx.cfg), ctx.item_emb)
    save_model(model, ctx.out / BACKBONE)
    ds.write_index_map(ctx.log, ctx.out / "index_map.json")
    return model


def load_backbone(ctx: Context) -> ModelState:
    path = ctx.out / BACKBONE
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run the train stage first")
    return load_model(path)


def _counters(ctx: Context, model: ModelState) -> CostCounters:
    return CostCounters(n=len(ctx.split.train), E=int(model.meta.get("epochs_run", 0)))


def identify(ctx: Context, model: ModelState, lambdas: Lambdas, cost: StageCost | None = None):
    """Influence cache and learned mask for the configured bias."""
    cfg = ctx.cfg
    spec = bias_spec(ctx)
    cgc = cg_config(cfg)
    s = precompute_influence_vector(model, ctx.split.train, spec, cgc, cost)
    cand = ds.sample_candidates(ctx.split.train, cfg.mask.candidate_ratio, cfg.mask.seed)
    cache = influence_scores(model, cand, ctx.split.train, s.x,
                             cache_fingerprint(model, spec, cgc), ctx.threads, cost)
    mask = optimize_mask(cand, cache, lambdas, mask_config(cfg))
    return cand, cache, mask


def stage_identify(ctx: Context, model: ModelState):
    counters = _counters(ctx, model)
    cand, cache, mask = identify(ctx, model, lambdas_of(ctx.cfg), counters.identify)
    counters.n_c = len(cand)
    write_influence_csv(cache, ctx.out / "influence.csv")
    write_mask_csv(mask, cache, ctx.out / "mask.csv")
    write_cost_json(counters, ctx.out / "cost.json")
    selected = select_unlearn_set(mask)
    log.info("identified %d of %d candidates for unlearning", len(selected), len(cand))
    return selected


def stage_unlearn(ctx: Context, model: ModelState):
    mask_path = ctx.out / "mask.csv"
    if not mask_path.is_file():
        raise FileNotFoundError(f"{mask_path} not found; run the identify stage first")
    selected = read_selected_ids(mask_path)
    cost_path = ctx.out / "cost.json"
    counters = read_cost_json(cost_path) if cost_path.is_file() else _counters(ctx, model)
    counters.unlearn = StageCost()
    counters.n_u = len(selected)
    result = compute_delta(model, ctx.split.train, selected, cg_config(ctx.cfg), ctx.threads,
                           counters.unlearn)
    save_model(result.updated_model, ctx.out / DEBIASED)
    remain = ctx.split.train.without(selected) if len(selected) else ctx.split.train
    before = float(np.linalg.norm(mean_loss_and_grad(model, remain)[1]))
    after = float(np.linalg.norm(mean_loss_and_grad(result.updated_model, remain)[1]))
    write_unlearn_json(unlearn_summary(result, before, after), ctx.out / "unlearn.json")
    write_cost_json(counters, cost_path)
    return result


def stage_evaluate(ctx: Context, backbone: ModelState, debiased: ModelState | None = None):
    if debiased is None and (ctx.out / DEBIASED).is_file():
        debiased = load_model(ctx.out / DEBIASED)
    models = {"backbone": backbone}
    if debiased is not None:
        models["debiased"] = debiased
    reports = {name: _eval(ctx, m, ctx.split.test) for name, m in models.items()}
    write_metrics_csv(reports, ctx.out / "metrics.csv")
    K = ctx.cfg.eval.ks[0]
    tables = {name: decile_report(m, ctx.split.test, ctx.pop, K, ctx.cfg.eval.exclude_history)
              for name, m in models.items()}
    write_decile_csv(tables, K, ctx.out / "decile_report.csv")
    return reports


def stage_gap(ctx: Context, backbone: ModelState, debiased: ModelState | None = None):
    if debiased is None:
        debiased = load_model(ctx.out / DEBIASED)
    selected = read_selected_ids(ctx.out / "mask.csv")
    retrained = retrain_oracle(ctx.split.train, selected, backbone, train_config(ctx.cfg))
    save_model(retrained, ctx.out / RETRAINED)
    remain = ctx.split.train.without(selected) if len(selected) else ctx.split.train
    e = ctx.cfg.eval
    report = gap_report(debiased, retrained, backbone, remain, ctx.split.test, e.ks, ctx.pop,
                        ctx.groups, e.tau, e.fair_pop, e.fair_attr, e.exclude_history)
    write_gap_csv(report, ctx.out / "gap.csv")
    return report


def _guard(stage, fn, *args):
    try:
        return fn(*args)
    except StageFailure:
        raise
    except (FairUnlearnError, ValueError, OSError, KeyError) as exc:
        raise StageFailure(stage, exc) from exc


def open_run(cfg: RunConfig, threads=1) -> Context:
    """Validate, load data and echo the effective config."""
    try:
        cfg.validate()
    except (ValueError, OSError) as exc:
        raise StageFailure("config", exc) from exc
    ctx = _guard("load", prepare, cfg, threads)
    (ctx.out / "FAILED").unlink(missing_ok=True)
    write_resolved(cfg, ctx.out / "config.resolved")
    return ctx


def mark_failed(out_dir, failure: StageFailure):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").write_text(f"stage: {failure.stage}\nerror: {failure}\n", encoding="utf-8")


def run_stage(ctx: Context, stage):
    if stage == "train":
        return _guard("train", stage_train, ctx)
    backbone = _guard(stage, load_backbone, ctx)
    if stage == "identify":
        return _guard(stage, stage_identify, ctx, backbone)
    if stage == "unlearn":
        return _guard(stage, stage_unlearn, ctx, backbone)
    if stage == "evaluate":
        return _guard(stage, stage_evaluate, ctx, backbone)
    if stage == "gap-check":
        return _guard(stage, stage_gap, ctx, backbone)
    raise ValueError(f"unknown stage {stage!r}")


def run_all(ctx: Context, last_stage="gap-check"):
    """Run every stage in order up to and including ``last_stage``."""
    if last_stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    results = {}
    for stage in STAGES[:STAGES.index(last_stage) + 1]:
        log.info("stage %s", stage)
        results[stage] = run_stage(ctx, stage)
    return results


# -- lambda grid -----------------------------------------------------------

def selection_score(ctx: Context, report: EvalReport):
    row = report[ctx.cfg.eval.ks[0]]
    kind = ctx.cfg.bias.kind
    if kind == "popularity":
        return row["f_pop"]
    if kind == "attribute":
        return row["f_attr"]
    a = ctx.cfg.bias.alpha
    return a * row["f_pop"] + (1 - a) * row["f_attr"]


def run_grid(ctx: Context, model: ModelState, grid=LAMBDA_GRID):
    """Score every ``(fair, acc, spa)`` triple by validation F-score.

    The influence cache is computed once; updates are cached per selected
    set.  Returns ``(rows, best)`` where rows are ``(Lambdas, n_selected,
    score)`` in grid order and ``best`` is the first row with the top score.
    """
    cgc = cg_config(ctx.cfg)
    cand, cache, _ = identify(ctx, model, lambdas_of(ctx.cfg))
    scores = {}
    rows = []
    for fair, acc, spa in itertools.product(grid, repeat=3):
        lam = Lambdas(fair, acc, spa)
        selected = select_unlearn_set(optimize_mask(cand, cache, lam, mask_config(ctx.cfg)))
        key = selected.tobytes()
        if key not in scores:
            updated = compute_delta(model, ctx.split.train, selected, cgc, ctx.threads).updated_model
            scores[key] = selection_score(ctx, _eval(ctx, updated, ctx.split.valid))
        rows.append((lam, len(selected), scores[key]))
    best = max(rows, key=lambda r: r[2])  # max keeps the first maximum
    return rows, best


def stage_grid(ctx: Context):
    model = ctx.out / BACKBONE
    model = load_model(model) if model.is_file() else stage_train(ctx)
    rows, best = run_grid(ctx, model)
    with open(ctx.out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fair", "acc", "spa", "n_selected", "valid_score", "chosen"])
        for row in rows:
            lam, n_sel, score = row
            w.writerow([repr(lam.fair), repr(lam.acc), repr(lam.spa), n_sel, repr(float(score)),
                        int(row is best)])
    lam = best[0]
    chosen = replace(ctx.cfg, mask=replace(ctx.cfg.mask, fair=lam.fair, acc=lam.acc, spa=lam.spa))
    write_resolved(chosen, ctx.out / "grid.resolved")
    return rows, best


def run_grid_stage(ctx: Context):
    return _guard("grid", stage_grid, ctx)
