"""End-to-end orchestration: split, train, filter, re-rank, evaluate."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .datamodel import Dataset, LongTailSplit, id_sort_key, partition_students, split_train_test
from .evalkit import MetricReport, baseline_rankings, evaluate
from .filtering import CandidateSet, build_candidate_set, solved_exercises
from .kcmp import MasteryPredictor, TrainingLog, train_kcmp
from .reranker import RerankInstance, Reranker, RerankLog, RerankOutput, rerank_many, train_reranker, window_labels

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    dataset: Dataset
    train: Dataset
    test: Dataset
    split: LongTailSplit
    skipped: tuple


def prepare(ds: Dataset, cfg: RunConfig) -> Prepared:
    """Temporal split, then active/inactive partition by training-history length."""
    res = split_train_test(ds, (cfg.data.train_ratio, cfg.data.test_ratio))
    split = partition_students(res.train, cfg.data.active_fraction)
    return Prepared(ds, res.train, res.test, split, res.skipped)


@dataclass
class TrainedPipeline:
    kcmp: MasteryPredictor
    reranker: Reranker | None
    kcmp_log: TrainingLog
    rerank_log: RerankLog | None


def disable_enhancer(cfg: RunConfig) -> RunConfig:
    """The ablation arm without the enhancer: no generator, ``lambda_s = beta = 0``."""
    cfg = copy.deepcopy(cfg)
    cfg.enhancer.enabled = False
    cfg.enhancer.lambda_s = 0.0
    cfg.enhancer.beta = 0.0
    return cfg


def representations(model: MasteryPredictor, seqs, active, batch_size: int = 32) -> np.ndarray:
    """``h+`` for many students, in length-sorted batches."""
    active = np.asarray(active, dtype=bool)
    out = np.zeros((len(seqs), model.enh.dim))
    order = np.argsort([len(s) for s in seqs], kind="stable")
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        hp, _ = model.representation([seqs[j] for j in idx], active[idx])
        out[idx] = hp
    return out


def build_instances(model: MasteryPredictor, histories: dict, split: LongTailSplit, cfg: RunConfig, windows=None):
    """Candidate sets and re-ranker inputs from each student's ``histories`` entry.

    With ``windows`` (student -> later interactions) the instances carry
    training labels.
    """
    catalog = model.catalog
    sids = sorted(histories, key=id_sort_key)
    seqs = [histories[s] for s in sids]
    active = [split.is_active(s) for s in sids]
    hp = representations(model, seqs, active)
    mastery = model.predict_mastery_batch(seqs, active)
    cands: dict[str, CandidateSet] = {}
    instances = []
    for i, s in enumerate(sids):
        excl = solved_exercises(seqs[i]) if cfg.filter.exclude_solved else None
        cs = build_candidate_set(s, mastery[i], catalog, cfg.filter.delta, cfg.filter.L, excl)
        cands[s] = cs
        labels = window_labels(cs, windows[s]) if windows is not None else None
        instances.append(RerankInstance(s, hp[i], cs, seqs[i], labels))
    return cands, instances


def fit(prep: Prepared, cfg: RunConfig, use_reranker: bool = True, kcmp_model=None) -> TrainedPipeline:
    """Train the mastery predictor (unless given), then the re-ranker.

    Re-ranker labels come from an inner temporal split of the training
    histories, so no test interaction is seen during training.
    """
    if kcmp_model is None:
        model, klog = train_kcmp(prep.train, prep.split, cfg.enhancer, cfg.kcmp)
    else:
        model, klog = kcmp_model
    rr, rlog = None, None
    if use_reranker:
        inner = split_train_test(prep.train, (cfg.data.train_ratio, cfg.data.test_ratio))
        prefixes = {s: inner.train.students[s] for s in inner.test.student_ids}
        windows = {s: inner.test.students[s] for s in inner.test.student_ids}
        _, instances = build_instances(model, prefixes, prep.split, cfg, windows)
        rr, rlog = train_reranker(instances, prep.train.catalog, model.enh.dim, cfg.reranker)
    return TrainedPipeline(model, rr, klog, rlog)


@dataclass
class Recommendations:
    candidates: dict  # student -> CandidateSet
    outputs: dict  # student -> RerankOutput
    mode: str


def recommend(tp: TrainedPipeline, prep: Prepared, cfg: RunConfig, mode: str | None = None) -> Recommendations:
    """Top-K lists from the full training histories (filter order if no re-ranker)."""
    mode = mode or cfg.eval.mode
    histories = {s: prep.train.students[s] for s in prep.train.student_ids}
    cands, instances = build_instances(tp.kcmp, histories, prep.split, cfg)
    if tp.reranker is None:
        outs = {
            s: RerankOutput(s, cs.exercises[: cfg.eval.K], -cs.weights[: cfg.eval.K], "filter", cfg.eval.K)
            for s, cs in cands.items()
        }
        return Recommendations(cands, outs, "filter")
    outs = {o.student_id: o for o in rerank_many(tp.reranker, instances, cfg.eval.K, mode)}
    return Recommendations(cands, outs, mode)


def rank_all(tp: TrainedPipeline, prep: Prepared, cfg: RunConfig, mode: str | None = None) -> dict:
    """``{student: ranked catalog indices}`` over each full candidate list."""
    mode = mode or cfg.eval.mode
    histories = {s: prep.train.students[s] for s in prep.train.student_ids}
    cands, instances = build_instances(tp.kcmp, histories, prep.split, cfg)
    if tp.reranker is None:
        return {s: cs.exercises.copy() for s, cs in cands.items()}
    outs = rerank_many(tp.reranker, instances, cfg.filter.L, mode)
    return {o.student_id: o.exercises for o in outs}


@dataclass
class ExperimentResult:
    report: MetricReport
    pipelines: dict  # arm name -> TrainedPipeline
    rankings: dict  # method -> {student: ranked indices}


ARM_FULL = "w_en"
ARM_NO_ENH = "wo_en"
ARM_NO_DIV = "relevance_only"


def run_experiment(prep: Prepared, cfg: RunConfig, arms=(ARM_FULL, ARM_NO_ENH, ARM_NO_DIV)) -> ExperimentResult:
    """Train the requested ablation arms and evaluate them with the baselines.

    ``w_en`` is the full pipeline, ``wo_en`` drops the enhancer and
    ``relevance_only`` zeroes the diversity gain in the re-ranker (it reuses
    the full arm's mastery predictor). Baselines reorder the full arm's
    candidate sets: filter order (no re-ranking), random and greedy coverage.
    """
    pipes: dict[str, TrainedPipeline] = {}
    rankings: dict[str, dict] = {}
    full = fit(prep, cfg)
    pipes[ARM_FULL] = full
    rankings[ARM_FULL] = rank_all(full, prep, cfg)
    if ARM_NO_ENH in arms:
        cfg_ne = disable_enhancer(cfg)
        pipes[ARM_NO_ENH] = fit(prep, cfg_ne)
        rankings[ARM_NO_ENH] = rank_all(pipes[ARM_NO_ENH], prep, cfg_ne)
    if ARM_NO_DIV in arms:
        cfg_nd = copy.deepcopy(cfg)
        cfg_nd.reranker.use_diversity = False
        pipes[ARM_NO_DIV] = fit(prep, cfg_nd, kcmp_model=(full.kcmp, full.kcmp_log))
        rankings[ARM_NO_DIV] = rank_all(pipes[ARM_NO_DIV], prep, cfg_nd)
    histories = {s: prep.train.students[s] for s in prep.train.student_ids}
    cands, _ = build_instances(full.kcmp, histories, prep.split, cfg)
    rankings.update(baseline_rankings(cands, prep.train.catalog, cfg.seed))
    report = evaluate(rankings, prep.test, prep.split, cfg.eval.ks)
    return ExperimentResult(report, pipes, rankings)
