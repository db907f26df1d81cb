"""Command-line front end.

Every command reads and writes under one output root (``--out``, else the
``EXREC_OUT`` environment variable, else ``runs``)::

    <out>/data/       interactions.csv, concepts.csv, latent_mastery.csv (synth only)
    <out>/model/      kcmp.npz, reranker.npz, training logs, config.txt, model.json
    <out>/recommend/  candidates.csv, recommendations.csv
    <out>/eval/       metrics.csv, metrics.txt, diversity_curve.csv, *.png

Exit codes: 0 success, 2 bad input or config, 3 missing artifact,
4 inconsistent artifacts, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, save_config
from .datamodel import Dataset, id_sort_key, ingest_interactions, read_dataset, write_dataset
from .errors import (
    ArtifactError,
    ConfigError,
    ExrecError,
    InconsistencyError,
    IngestError,
    NumericError,
    StateError,
    TrainingError,
)
from .evalkit import baseline_rankings, evaluate
from .filtering import CandidateSet, write_candidates_csv
from .kcmp import MasteryPredictor, TrainingLog
from .pipeline import (
    ARM_FULL,
    Prepared,
    TrainedPipeline,
    disable_enhancer,
    fit,
    prepare,
    recommend,
    run_experiment,
)
from .reranker import Reranker, write_rerank_csv
from .synthetic import generate_synthetic

ENV_OUT = "EXREC_OUT"
EXIT_OK, EXIT_INPUT, EXIT_ARTIFACT, EXIT_INCONSISTENT, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("exrec")


# -- helpers -------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Output layout plus the manifest written when a command finishes."""

    def __init__(self, out: Path, cfg: RunConfig, command: str):
        self.out = out
        self.cfg = cfg
        self.command = command
        self.files: list[Path] = []
        self.t0 = time.time()

    def dir(self, name) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def produced(self, *paths):
        self.files.extend(Path(p) for p in paths)

    def write_manifest(self, extra=None):
        from .config import to_text

        doc = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config": to_text(self.cfg).splitlines(),
            "files": sorted(str(p.relative_to(self.out)) for p in self.files),
            "wall_clock_seconds": round(time.time() - self.t0, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if extra:
            doc.update(extra)
        _atomic_write_text(self.out / f"manifest_{self.command}.json", json.dumps(doc, indent=2) + "\n")


def _load_data(run: Run) -> Dataset:
    d = run.out / "data"
    for name in ("interactions.csv", "concepts.csv"):
        if not (d / name).exists():
            raise ArtifactError(f"missing dataset file {d / name}; run ingest or synth first")
    return read_dataset(d, run.cfg.data.n_concepts)


def _summary_table(ds: Dataset) -> str:
    s = ds.summary()
    head = "".join(f"{k:>14}" for k in s)
    row = "".join(f"{v:>14}" for v in s.values())
    return f"{head}\n{row}\n"


def _read_json(path: Path):
    if not path.exists():
        raise ArtifactError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))


# -- commands --------------------------------------------------------------------


def cmd_ingest(args, run: Run):
    cfg = run.cfg
    inter = args.interactions or cfg.data.interactions
    conc = args.concepts or cfg.data.concepts
    if not inter or not conc:
        raise ConfigError("ingest needs --interactions and --concepts (or data.* in the config)")
    for p in (inter, conc):
        if not Path(p).exists():
            raise ConfigError(f"input file not found: {p}")
    ds = ingest_interactions(inter, conc, args.n_concepts or cfg.data.n_concepts)
    run.produced(*write_dataset(ds, run.dir("data")))
    sys.stdout.write(_summary_table(ds))
    run.write_manifest({"fingerprint": ds.fingerprint()})


def cmd_synth(args, run: Run):
    cfg = run.cfg
    if args.students is not None:
        cfg.synth.n_students = args.students
    sd = generate_synthetic(cfg.synth)
    ds = sd.dataset
    d = run.dir("data")
    run.produced(*write_dataset(ds, d))
    mastery = sd.final_mastery()
    side = d / "latent_mastery.csv"
    with open(side, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("student_id", "concept", "mastery"))
        for i, sid in enumerate(sd.truth.student_ids):
            for k in range(ds.n_concepts):
                w.writerow((sid, k, f"{mastery[i, k]:.10f}"))
    run.produced(side)
    sys.stdout.write(_summary_table(ds))
    run.write_manifest({"fingerprint": ds.fingerprint()})


def _save_pipeline(tp: TrainedPipeline, run: Run, cfg: RunConfig, ds: Dataset, flags: dict):
    d = run.dir("model")
    tp.kcmp.save(d / "kcmp.npz")
    tp.kcmp_log.write_csv(d / "kcmp_log.csv")
    run.produced(d / "kcmp.npz", d / "kcmp_log.csv")
    if tp.reranker is not None:
        tp.reranker.save(d / "reranker.npz")
        tp.rerank_log.write_csv(d / "reranker_log.csv")
        run.produced(d / "reranker.npz", d / "reranker_log.csv")
    elif (d / "reranker.npz").exists():
        (d / "reranker.npz").unlink()
    save_config(cfg, d / "config.txt")
    meta = {"fingerprint": ds.fingerprint(), "reranker": tp.reranker is not None, **flags}
    _atomic_write_text(d / "model.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    run.produced(d / "config.txt", d / "model.json")


def cmd_train(args, run: Run):
    ds = _load_data(run)
    cfg = disable_enhancer(run.cfg) if args.no_enhancer else run.cfg
    prep = prepare(ds, cfg)
    try:
        tp = fit(prep, cfg, use_reranker=not args.no_rerank)
    except TrainingError as exc:
        partial = getattr(exc, "log", None)
        if partial is not None:
            name = "kcmp_log.csv" if isinstance(partial, TrainingLog) else "reranker_log.csv"
            partial.write_csv(run.dir("model") / f"partial_{name}")
        raise
    _save_pipeline(tp, run, cfg, ds, {"no_enhancer": bool(args.no_enhancer), "no_rerank": bool(args.no_rerank)})
    k = tp.kcmp_log.rows[-1]
    print(f"kcmp: epochs={len(tp.kcmp_log.rows)} loss_total={k[1]:.5f} loss_k={k[2]:.5f}")
    if tp.rerank_log is not None:
        print(f"reranker: epochs={len(tp.rerank_log.rows)} loss={tp.rerank_log.rows[-1][1]:.5f}")
    run.write_manifest({"fingerprint": ds.fingerprint()})


def _load_pipeline(run: Run, ds: Dataset):
    d = run.out / "model"
    meta = _read_json(d / "model.json")
    if meta["fingerprint"] != ds.fingerprint():
        raise InconsistencyError("model was trained on a different dataset than the one in data/")
    if not (d / "config.txt").exists():
        raise ArtifactError(f"missing {d / 'config.txt'}")
    cfg = load_config(d / "config.txt")
    model = MasteryPredictor(ds.catalog, cfg.enhancer, cfg.kcmp)
    model.load(d / "kcmp.npz")
    rr = None
    if meta["reranker"]:
        rr = Reranker(ds.catalog, cfg.enhancer.dim, cfg.reranker)
        rr.load(d / "reranker.npz")
    return TrainedPipeline(model, rr, None, None), cfg


def cmd_recommend(args, run: Run):
    ds = _load_data(run)
    tp, cfg = _load_pipeline(run, ds)
    cfg.eval.K = args.k
    prep = prepare(ds, cfg)
    recs = recommend(tp, prep, cfg, args.mode)
    d = run.dir("recommend")
    sids = sorted(recs.outputs, key=id_sort_key)
    write_candidates_csv([recs.candidates[s] for s in sids], ds.catalog, d / "candidates.csv")
    write_rerank_csv([recs.outputs[s] for s in sids], ds.catalog, d / "recommendations.csv")
    run.produced(d / "candidates.csv", d / "recommendations.csv")
    print(f"recommended top-{args.k} ({recs.mode}) for {len(sids)} students")
    run.write_manifest({"fingerprint": ds.fingerprint(), "mode": recs.mode, "k": args.k})


def _read_ranked(path: Path, catalog) -> dict:
    if not path.exists():
        raise ArtifactError(f"missing {path}; run recommend first")
    out: dict[str, list] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            eid = row["exercise_id"]
            if eid not in catalog.index:
                raise InconsistencyError(f"{path}: exercise {eid} is not in the catalog")
            out.setdefault(row["student_id"], []).append((int(row["rank"]), catalog.index[eid], row))
    return {s: sorted(v) for s, v in out.items()}


def _write_report(report, d: Path, run: Run, ks):
    from .plotting import plot_diversity_curve, plot_metric_bars

    report.write_csv(d / "metrics.csv")
    report.write_diversity_curve(d / "diversity_curve.csv")
    (d / "metrics.txt").write_text(report.to_text(ks), encoding="utf-8")
    plot_diversity_curve(report, d / "diversity_curve.png")
    plot_metric_bars(report, d / "ndcg_at_5.png", "ndcg", 5 if 5 in ks else ks[0])
    plot_metric_bars(report, d / "recall_at_5.png", "recall", 5 if 5 in ks else ks[0])
    run.produced(*(d / n for n in ("metrics.csv", "diversity_curve.csv", "metrics.txt", "diversity_curve.png", "ndcg_at_5.png", "recall_at_5.png")))
    sys.stdout.write(report.to_text(ks))


def cmd_evaluate(args, run: Run):
    ds = _load_data(run)
    rec_manifest = _read_json(run.out / "manifest_recommend.json")
    if rec_manifest.get("fingerprint") != ds.fingerprint():
        raise InconsistencyError("recommendations were produced from a different dataset version")
    cfg = run.cfg
    prep = prepare(ds, cfg)
    rd = run.out / "recommend"
    recs = _read_ranked(rd / "recommendations.csv", ds.catalog)
    cand_rows = _read_ranked(rd / "candidates.csv", ds.catalog)
    unknown = set(recs) - set(prep.train.students)
    if unknown:
        raise InconsistencyError(f"recommendations for unknown students, e.g. {sorted(unknown)[0]}")
    cands = {
        s: CandidateSet(s, np.array([j for _, j, _ in v]), np.array([float(r["weight"]) for *_, r in v]),
                        np.array([float(r["difficulty"]) for *_, r in v]), len(v))
        for s, v in cand_rows.items()
    }
    method = "reranked" if rec_manifest.get("mode") in ("det", "prob") else "filter_order_model"
    rankings = {method: {s: [j for _, j, _ in v] for s, v in recs.items()}}
    rankings.update(baseline_rankings(cands, ds.catalog, cfg.seed))
    ks = tuple(k for k in cfg.eval.ks if k <= rec_manifest.get("k", max(cfg.eval.ks)))
    report = evaluate(rankings, prep.test, prep.split, ks)
    _write_report(report, run.dir("eval"), run, ks)
    run.write_manifest({"fingerprint": ds.fingerprint()})


def cmd_pipeline(args, run: Run):
    """Synthesise (or ingest), train every ablation arm, evaluate, report."""
    cfg = run.cfg
    if cfg.data.interactions and cfg.data.concepts:
        ds = ingest_interactions(cfg.data.interactions, cfg.data.concepts, cfg.data.n_concepts)
    else:
        ds = generate_synthetic(cfg.synth).dataset
    run.produced(*write_dataset(ds, run.dir("data")))
    sys.stdout.write(_summary_table(ds))
    prep = prepare(ds, cfg)
    res = run_experiment(prep, cfg)
    tp = res.pipelines[ARM_FULL]
    _save_pipeline(tp, run, cfg, ds, {"no_enhancer": False, "no_rerank": False})
    recs = recommend(tp, prep, cfg)
    d = run.dir("recommend")
    sids = sorted(recs.outputs, key=id_sort_key)
    write_candidates_csv([recs.candidates[s] for s in sids], ds.catalog, d / "candidates.csv")
    write_rerank_csv([recs.outputs[s] for s in sids], ds.catalog, d / "recommendations.csv")
    run.produced(d / "candidates.csv", d / "recommendations.csv")
    _write_report(res.report, run.dir("eval"), run, tuple(cfg.eval.ks))
    run.write_manifest({"fingerprint": ds.fingerprint(), "arms": sorted(res.pipelines)})


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exrec", description="Difficulty-aware, diversity-aware exercise recommendation.")
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--seed", type=int, help="seed for every stochastic component")
    p.add_argument("--out", help=f"output root (default: ${ENV_OUT} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate an interaction log and concept map")
    s.add_argument("--interactions")
    s.add_argument("--concepts")
    s.add_argument("--n-concepts", type=int)

    s = sub.add_parser("synth", help="generate a synthetic long-tailed population")
    s.add_argument("--students", type=int)

    s = sub.add_parser("train", help="train the mastery predictor and re-ranker")
    s.add_argument("--no-enhancer", action="store_true", help="ablation: no representation enhancer")
    s.add_argument("--no-rerank", action="store_true", help="ablation: keep the filter order")

    s = sub.add_parser("recommend", help="write candidate sets and top-K lists")
    s.add_argument("--mode", choices=("det", "prob"), default="prob")
    s.add_argument("--k", type=int, default=10)

    sub.add_parser("evaluate", help="score recommendations against the test split")
    sub.add_parser("pipeline", help="full synthetic experiment with all ablation arms")
    return p


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ArtifactError):
        return EXIT_ARTIFACT
    if isinstance(exc, InconsistencyError):
        return EXIT_INCONSISTENT
    if isinstance(exc, (NumericError, TrainingError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, IngestError, StateError, ValueError, FileNotFoundError)):
        return EXIT_INPUT
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        seed = args.seed if args.seed is not None else cfg.seed
        cfg = cfg.with_seed(seed)
        if args.command == "recommend" and args.k < 1:
            raise ConfigError("--k must be >= 1")
        cfg.validate()
        out = Path(args.out or os.environ.get(ENV_OUT) or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, Run(out, cfg, args.command))
    except ExrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
