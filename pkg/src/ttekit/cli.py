"""Command-line pipeline: generate -> select -> label -> pretrain -> adapt -> evaluate.

Every subcommand writes its artifacts into ``--out`` plus a ``config.json``
echo of the resolved options. Exit codes: 0 success, 1 validation error or
bad usage, 2 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import adaptation, labeling, metrics, peann, synth, task_selection
from .cohort import ParseError, Vocabulary, load_events, load_features, load_ontology, write_features

logger = logging.getLogger("ttekit")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
DEFAULT_HORIZONS = "30,183,365"
METRICS = ("harrells-c", "td-c", "auroc", "ibs")
# options that never change outputs; kept out of the echoed config
_NOT_ECHOED = {"threads", "config", "out", "command", "func", "verbose"}
_PATH_OPTS = {
    "spec", "events", "patients", "ontology", "tasks", "features", "labels",
    "predictions", "model", "heads",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads(value) -> int:
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("TTE_ENGINE_THREADS")
    return max(1, int(env)) if env else 1


def _horizons(text: str) -> list[float]:
    try:
        out = [float(h) for h in str(text).split(",") if h.strip()]
    except ValueError:
        raise ValueError(f"bad --horizons {text!r}") from None
    if any(h <= 0 for h in out):
        raise ValueError("horizons must be > 0")
    return out


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(args, out: Path) -> None:
    doc = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_ECHOED or callable(value):
            continue
        if key in _PATH_OPTS and value is not None:
            paths = value if isinstance(value, list) else [value]
            rel = [os.path.relpath(Path(str(p).split("=", 1)[-1]).resolve(), out.resolve()) for p in paths]
            if isinstance(value, list):
                names = [str(p).split("=", 1)[0] if "=" in str(p) else None for p in paths]
                value = [f"{n}={r}" if n else r for n, r in zip(names, rel)]
            else:
                value = rel[0]
        doc[key] = value
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_cohort(args, with_features=False):
    vocab = Vocabulary()
    cohort = load_events(args.events, getattr(args, "patients", None), vocab=vocab)
    if with_features:
        cohort = load_features(args.features, cohort)
    return cohort, vocab


def _load_dag(args, vocab):
    if getattr(args, "ontology", None):
        return load_ontology(args.ontology, vocab)
    from .cohort import OntologyDag

    return OntologyDag(vocab, (), ())


def _aligned_labels(path, cohort, vocab) -> labeling.TaskLabelMatrix:
    lab = labeling.read_labels(path, vocab)
    pos = {pid: i for i, pid in enumerate(lab.patient_ids)}
    missing = [pid for pid in cohort.patient_ids if pid not in pos]
    if missing:
        raise ValueError(f"{path}: no labels for patient {missing[0]!r}")
    return lab.subset([pos[pid] for pid in cohort.patient_ids])


# commands


def cmd_generate(args) -> int:
    out = _out(args)
    spec = synth.load_spec(args.spec or synth.FIXTURE_200, seed=args.seed)
    if args.n_patients is not None:
        spec = dataclasses.replace(spec, n_patients=args.n_patients)
    result = synth.generate(spec)
    synth.write_synth(result, out)
    _echo_config(args, out)
    print(f"generated {spec.n_patients} patients, {spec.n_tasks} tasks -> {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    out = _out(args)
    cohort, vocab = _load_cohort(args)
    dag = _load_dag(args, vocab)
    stats = task_selection.compute_code_stats(cohort, dag, split=args.split, threads=_threads(args.threads))
    tasks = task_selection.select_tasks(stats, dag, args.budget, args.strategy, args.theta)
    task_selection.write_tasks(tasks, out / "tasks.txt")
    with open(out / "code_stats.csv", "w", encoding="utf-8") as fh:
        fh.write("code,patient_presence,raw_count,entropy\n")
        for s in stats:
            fh.write(f"{s.code.text},{s.patient_presence!r},{s.raw_count},{s.entropy!r}\n")
    _echo_config(args, out)
    print(f"selected {len(tasks)} of {len(stats)} candidate codes ({args.strategy})")
    return EXIT_OK


def cmd_label(args) -> int:
    out = _out(args)
    cohort, vocab = _load_cohort(args)
    dag = _load_dag(args, vocab)
    tasks = task_selection.read_tasks(args.tasks, vocab)
    threads = _threads(args.threads)
    if args.mode == "tte":
        mat = labeling.label_tte(cohort, dag, tasks, threads=threads)
    elif args.mode == "visit":
        mat = labeling.label_visit(cohort, dag, tasks, window=args.visit_window, threads=threads)
    else:
        mat = labeling.label_mtl(cohort, dag, tasks, threads=threads)
    labeling.write_labels(mat, out / "labels.csv")
    if args.mode == "tte":
        for h in _horizons(args.horizons):
            binary = labeling.binarize_horizon(mat, h)
            labeling.write_horizon_labels(binary, mat, out / f"labels_h{int(h) if h == int(h) else h}.csv")
    dens = labeling.label_density(mat)
    with open(out / "label_density.csv", "w", encoding="utf-8") as fh:
        fh.write("count,cumulative_fraction\n")
        for c, f in dens.cdf:
            fh.write(f"{c},{f!r}\n")
    _echo_config(args, out)
    print(f"{args.mode} labels: {mat.n_patients} patients x {mat.n_tasks} tasks, mean density {dens.mean:.3f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _out(args)
    cohort, vocab = _load_cohort(args, with_features=True)
    labels = _aligned_labels(args.labels, cohort, vocab)
    train_rows = cohort.split_mask("train")
    if args.grid == "uniform":
        grid = peann.TimeGrid.uniform(labels.durations[train_rows], args.pieces)
    else:
        grid = peann.TimeGrid.quantile(labels.durations[train_rows], labels.events[train_rows], args.pieces)
    model = peann.init_model(
        labels.tasks,
        grid,
        cohort.features.shape[1],
        kind=args.featurizer,
        hidden=args.hidden,
        seed=args.seed,
        labels=labels.subset(train_rows),
    )
    config = peann.TrainConfig(
        lr=args.lr, epochs=args.epochs, batch=args.batch or None, seed=args.seed, optimizer=args.optimizer
    )
    result = peann.train(model, cohort, labels, config)
    peann.save_model(result.model, out / "model.json")
    peann.write_loss_curve(result.curve, out / "loss_curve.csv")
    write_features(out / "embeddings.csv", cohort.patient_ids, result.model.embed(cohort.features))
    _echo_config(args, out)
    final = result.losses("train")[-1] if result.curve else float("nan")
    print(f"pretrained {labels.n_tasks} tasks x {grid.n_pieces} pieces; final train nll {final:.6f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    out = _out(args)
    cohort, vocab = _load_cohort(args, with_features=True)
    labels = _aligned_labels(args.labels, cohort, vocab)
    X = np.asarray(cohort.features)
    train_rows = np.flatnonzero(cohort.split_mask("train"))
    heads_dir = out / "heads"
    heads_dir.mkdir(exist_ok=True)
    wanted = [t for t in args.task.split(",")] if args.task else [c.text for c in labels.tasks]
    rows = []
    cfg = peann.TrainConfig(lr=args.lr, epochs=args.epochs, batch=None, seed=args.seed)
    for text in wanted:
        k = labels.task_index(text)
        d, e = labels.durations[train_rows, k], labels.events[train_rows, k]
        fname = heads_dir / (text.replace("/", "_") + ".json")
        if args.head == "cox":
            if not e.any():
                logger.warning("task %s has no training events; skipped", text)
                continue
            head = adaptation.fit_cox(adaptation.CoxHead.init(X.shape[1]), X[train_rows], config=cfg, durations=d, events=e)
            scores = head.risk(X)
            adaptation.save_head(head, fname, text)
        else:
            binary = labeling.binarize_horizon(labels, args.horizon)
            inc = binary.included[train_rows, k]
            y = binary.positive[train_rows, k][inc]
            head = adaptation.fit_logistic(
                adaptation.LogisticHead(np.zeros(X.shape[1])),
                X[train_rows][inc],
                y.astype(int),
                config=cfg,
                penalty=args.penalty,
                strength=args.strength,
            )
            scores = head.predict_proba(X)
            adaptation.save_head(head, fname, text, horizon_days=args.horizon)
        rows.extend((pid, text, s) for pid, s in zip(cohort.patient_ids, scores))
    adaptation.write_predictions(out / "predictions.csv", rows)
    _echo_config(args, out)
    print(f"fitted {args.head} heads for {len(set(r[1] for r in rows))} tasks")
    return EXIT_OK


def _survival_source(args, vocab, cohort):
    """Per-task callables giving survival matrices, from a PEANN model or Cox heads."""
    if not args.features:
        return {}
    cohort = load_features(args.features, cohort)
    X = np.asarray(cohort.features)
    sources = {}
    if args.model:
        model = peann.load_model(args.model, vocab)
        for k, code in enumerate(model.tasks):
            sources[code.text] = (lambda k: lambda rows, t: model.predict_survival(X[rows], k, t))(k)
    if args.heads:
        for path in sorted(Path(args.heads).glob("*.json")):
            head, doc = adaptation.load_head(path)
            if doc["kind"] == "cox" and len(head.baseline_times):
                sources.setdefault(doc["task"], (lambda h: lambda rows, t: h.predict_survival(X[rows], t))(head))
    return sources


def _model_predictions(spec: str):
    name, _, path = spec.rpartition("=")
    return (name or Path(path).parent.name or "model"), path


def cmd_evaluate(args) -> int:
    out = _out(args)
    cohort, vocab = _load_cohort(args)
    labels = _aligned_labels(args.labels, cohort, vocab)
    rows = np.flatnonzero(cohort.split_mask(args.split)) if args.split != "all" else np.arange(len(cohort))
    wanted = METRICS if args.metric == "all" else (args.metric,)
    threads = _threads(args.threads)
    surv_sources = _survival_source(args, vocab, cohort)
    pos = cohort.index_of()

    reports, by_key = [], {}
    for model_name, path in (_model_predictions(p) for p in args.predictions):
        preds = adaptation.read_predictions(path)
        for task in sorted(preds):
            k = labels.task_index(task)
            score_map = preds[task]
            sel = np.array([r for r in rows if cohort.patients[r].patient_id in score_map], dtype=int)
            s = np.array([score_map[cohort.patients[r].patient_id] for r in sel])
            d, e = labels.durations[sel, k], labels.events[sel, k]
            for metric in wanted:
                fn = _metric_closure(metric, s, d, e, args, surv_sources.get(task), sel)
                if fn is None:
                    continue
                name = f"{model_name}/{task}/{metric}"
                try:
                    rep = metrics.bootstrap(fn, len(sel), n_boot=args.n_boot, seed=args.seed, name=name, threads=threads)
                except metrics.UndefinedMetricError as exc:
                    logger.warning("%s undefined: %s", name, exc)
                    continue
                reports.append(rep)
                by_key.setdefault((task, metric), []).append(rep)
                print(f"{name}\t{rep.estimate:.3f}\t[{rep.ci_low:.3f}, {rep.ci_high:.3f}]")
    tests = []
    for (task, metric), reps in sorted(by_key.items()):
        for i in range(len(reps)):
            for j in range(i + 1, len(reps)):
                tests.append({"a": reps[i].name, "b": reps[j].name, "p_value": metrics.z_test(reps[i], reps[j])})
    metrics.write_report(out / "report.json", reports, tests)
    _echo_config(args, out)
    return EXIT_OK


def _metric_closure(metric, s, d, e, args, surv_fn, sel):
    if metric == "harrells-c":
        return lambda idx: metrics.harrells_c(s[idx], durations=d[idx], events=e[idx])
    if metric == "td-c":
        if surv_fn is not None:
            times = np.unique(d[e])
            R = 1.0 - surv_fn(sel, times)

            def td(idx):
                dd, ee = d[idx], e[idx]
                return metrics.td_c_statistic(lambda t: R[idx][:, np.searchsorted(times, t)], durations=dd, events=ee)

            return td
        return lambda idx: metrics.td_c_statistic(s[idx], durations=d[idx], events=e[idx])
    if metric == "auroc":
        positive = e & (d <= args.horizon)
        included = positive | (d >= args.horizon)

        def auc(idx):
            idx = idx[included[idx]]
            return metrics.auroc(s[idx], positive[idx])

        return auc
    if metric == "ibs":
        if surv_fn is None:
            if args.metric == "ibs":
                raise ValueError("ibs needs --features with --model or --heads")
            return None
        horizon = float(d.max()) if args.ibs_horizon is None else args.ibs_horizon
        S = surv_fn(sel, np.linspace(0.0, horizon, 100))
        return lambda idx: metrics.integrated_brier(S[idx], durations=d[idx], events=e[idx], horizon=horizon)
    raise ValueError(f"unknown metric {metric!r}")


def cmd_km(args) -> int:
    out = _out(args)
    vocab = Vocabulary()
    labels = labeling.read_labels(args.labels, vocab)
    k = labels.task_index(args.task) if args.task else 0
    rows = np.arange(labels.n_patients)
    if args.split != "all":
        if not args.events:
            raise ValueError("--split needs --events (and --patients) to know the splits")
        cohort = load_events(args.events, args.patients, vocab=vocab)
        keep = set(cohort.patients[i].patient_id for i in np.flatnonzero(cohort.split_mask(args.split)))
        rows = np.array([i for i, pid in enumerate(labels.patient_ids) if pid in keep], dtype=int)
    curve = metrics.kaplan_meier(durations=labels.durations[rows, k], events=labels.events[rows, k])
    metrics.write_km(curve, out / "km.csv")
    _echo_config(args, out)
    print(f"KM for {labels.tasks[k].text}: {len(curve.times)} event times")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """All stages in order, each in its own subdirectory of ``--out``."""
    out = _out(args)
    t0 = time.perf_counter()
    common = ["--seed", str(args.seed)]
    if args.threads is not None:
        common += ["--threads", str(args.threads)]
    gen, sel, lab, pre, ada, ev, km = (str(out / s) for s in ("generate", "select", "label", "pretrain", "adapt", "evaluate", "km"))
    data = ["--events", f"{gen}/events.jsonl", "--patients", f"{gen}/patients.jsonl"]
    steps = [
        ["generate", "--out", gen] + (["--spec", args.spec] if args.spec else []),
        ["select", "--out", sel, *data, "--ontology", f"{gen}/ontology.tsv", "--budget", str(args.budget), "--strategy", args.strategy],
        ["label", "--out", lab, *data, "--ontology", f"{gen}/ontology.tsv", "--tasks", f"{sel}/tasks.txt"],
        ["pretrain", "--out", pre, *data, "--features", f"{gen}/features.csv", "--labels", f"{lab}/labels.csv",
         "--pieces", str(args.pieces), "--epochs", str(args.epochs)],
        ["adapt", "--out", ada, *data, "--features", f"{pre}/embeddings.csv", "--labels", f"{lab}/labels.csv"],
        ["evaluate", "--out", ev, *data, "--labels", f"{lab}/labels.csv", "--predictions", f"tte={ada}/predictions.csv",
         "--features", f"{pre}/embeddings.csv", "--heads", f"{ada}/heads", "--metric", "all", "--n-boot", str(args.n_boot)],
        ["km", "--out", km, "--labels", f"{lab}/labels.csv"],
    ]
    for step in steps:
        code = main(step + common)
        if code != EXIT_OK:
            return code
    _echo_config(args, out)
    print(f"pipeline finished in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; flags override it")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker count (env TTE_ENGINE_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--events", required=True)
    data.add_argument("--patients")

    parser = _Parser(prog="ttekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--spec", help="synth spec JSON (default: bundled 200-patient fixture)")
    p.add_argument("--n-patients", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("select", parents=[common, data], help="choose pretraining tasks")
    p.add_argument("--ontology")
    p.add_argument("--strategy", choices=("rank-entropy", "greedy-cover"), default="rank-entropy")
    p.add_argument("--budget", type=int, default=task_selection.DEFAULT_BUDGET)
    p.add_argument("--theta", type=float, default=task_selection.DEFAULT_THETA)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("label", parents=[common, data], help="build task labels")
    p.add_argument("--ontology")
    p.add_argument("--tasks", required=True)
    p.add_argument("--mode", choices=("tte", "visit", "mtl"), default="tte")
    p.add_argument("--horizons", default=DEFAULT_HORIZONS)
    p.add_argument("--visit-window", type=float, default=labeling.DEFAULT_VISIT_WINDOW)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("pretrain", parents=[common, data], help="fit the piecewise exponential model")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--pieces", type=int, default=peann.DEFAULT_PIECES)
    p.add_argument("--grid", choices=("uniform", "quantile"), default="uniform")
    p.add_argument("--featurizer", choices=("linear", "mlp"), default="linear")
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=256, help="0 for full batch")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common, data], help="fit task heads on frozen features")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--head", choices=("cox", "logistic"), default="cox")
    p.add_argument("--task", help="comma-separated task codes (default: all)")
    p.add_argument("--horizon", type=float, default=365.0, help="logistic heads: days")
    p.add_argument("--penalty", choices=("l1", "l2"), default="l2")
    p.add_argument("--strength", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=400)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", parents=[common, data], help="bootstrap metrics and z-tests")
    p.add_argument("--labels", required=True)
    p.add_argument("--predictions", action="append", required=True, help="[name=]predictions.csv, repeatable")
    p.add_argument("--metric", choices=METRICS + ("all",), default="harrells-c")
    p.add_argument("--n-boot", type=int, default=metrics.N_BOOT)
    p.add_argument("--split", default="test", help="train/valid/test/all")
    p.add_argument("--horizon", type=float, default=365.0, help="auroc threshold in days")
    p.add_argument("--ibs-horizon", type=float)
    p.add_argument("--features")
    p.add_argument("--model", help="PEANN model.json for survival curves")
    p.add_argument("--heads", help="directory of Cox head.json files for survival curves")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("km", parents=[common], help="Kaplan-Meier table for one task")
    p.add_argument("--labels", required=True)
    p.add_argument("--task")
    p.add_argument("--events")
    p.add_argument("--patients")
    p.add_argument("--split", default="all")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("pipeline", parents=[common], help="run every stage on a synthetic spec")
    p.add_argument("--spec")
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--strategy", choices=("rank-entropy", "greedy-cover"), default="rank-entropy")
    p.add_argument("--pieces", type=int, default=peann.DEFAULT_PIECES)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--n-boot", type=int, default=metrics.N_BOOT)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _config_tokens(path) -> list[str]:
    """Turn a JSON config object into flag tokens placed before the real flags."""
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    tokens = []
    for key, value in cfg.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                tokens.append(flag)
        elif isinstance(value, list):
            for v in value:
                tokens += [flag, str(v)]
        elif value is not None:
            tokens += [flag, str(value)]
    return tokens


def _parse(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and argv:
        # flags given on the command line come later, so they win
        pos = next((i for i, a in enumerate(argv) if not a.startswith("-")), 0)
        argv = argv[: pos + 1] + _config_tokens(known.config) + argv[pos + 1 :]
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, peann.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
