"""``rica`` command line: simulate, preprocess, train, extract and analyse.

Data moves between steps as matrix bundles. Per-subject series are stored
as ``x/0000``, ``x/0001``, ... and per-subject model outputs under
``sources/``, ``mu/``, ``sigma/`` and ``hidden/`` with the same numbering.
Progress and diagnostics go to standard error; exit status is 0 on success,
2 for usage/config errors, 3 for malformed data files and 4 for numerical
failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .errors import (ConfigError, DataFormatError, NumericalError, RicaError,
                     SingularUnmixing)
from .io import (MatrixBundle, csv_text, export_dot, load_config, read_bundle,
                 read_checkpoint, read_csv, svg_heatmap, write_bundle,
                 write_checkpoint)
from .matcore import pca_fit
from .synth import simulate_cohort
from .train import detrend, fit, variance_normalize

TRACE_KINDS = ("sources", "mu", "sigma", "hidden")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def worker_count():
    raw = os.environ.get("RICA_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RICA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"RICA_THREADS must be a positive integer, got {raw!r}")
    return n


def _ordered_map(fn, items):
    items = list(items)
    workers = min(worker_count(), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _key(i):
    return f"{i:04d}"


def _subject_series(bundle, prefix="x/"):
    series = bundle.series(prefix)
    if not series:
        raise DataFormatError(f"bundle has no arrays under {prefix!r}")
    return series


def parse_indices(text, n):
    """Subject selection like ``0:40`` or ``0,3,5:8`` (Python slice semantics)."""
    if text is None:
        return list(range(n))
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            if ":" in part:
                lo, hi = part.split(":", 1)
                out.extend(range(n)[slice(int(lo) if lo else None, int(hi) if hi else None)])
            else:
                i = int(part)
                if not -n <= i < n:
                    raise ValueError(f"index {i} out of range")
                out.append(i % n)
        except ValueError as exc:
            raise ConfigError(f"--subjects: cannot parse {part!r} ({exc})") from None
    if not out:
        raise ConfigError("--subjects selects no subjects")
    return out


def _copy_side_arrays(src: MatrixBundle, dst: MatrixBundle, skip_prefixes):
    for name, arr in src.arrays.items():
        if not any(name.startswith(p) for p in skip_prefixes) and name not in dst:
            dst.add(name, arr)


# -- subcommands -----------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config, "sim")
    obs, truth = simulate_cohort(cfg)
    b = MatrixBundle()
    for i, x in enumerate(obs):
        b.add(f"x/{_key(i)}", x)
    for i, s in enumerate(truth.states):
        b.add(f"states/{_key(i)}", s)
    for i, e in enumerate(truth.sources):
        b.add(f"truth_sources/{_key(i)}", e)
    b.add("labels", truth.labels)
    b.add("mixing", truth.mixing)
    b.add("hrf_params", truth.hrf_params.reshape(len(obs), 2))
    b.metadata.update({"kind": "cohort", "subjects": str(len(obs)),
                       "config": json.dumps(cfg.to_dict(), sort_keys=True),
                       "hrf_params_columns": "peak_delay,undershoot_delay"})
    write_bundle(args.out, b)
    _say(f"simulate: {len(obs)} subjects x {cfg.timepoints} timepoints -> {args.out}")


def cmd_preprocess(args):
    src = read_bundle(args.data)
    subjects = _subject_series(src)
    out_series = []
    for x in subjects:
        cols = []
        for j in range(x.shape[1]):
            col = x[:, j]
            if not args.no_detrend:
                col = detrend(col, args.degree)
            if not args.no_normalize:
                col = variance_normalize(col)
            cols.append(col)
        out_series.append(np.column_stack(cols))
    dst = MatrixBundle()
    lengths = [len(s) for s in out_series]
    if args.components is not None:
        loadings, components, eigenvalues = pca_fit(np.vstack(out_series), args.components)
        cuts = np.cumsum(lengths)[:-1]
        out_series = [np.asarray(p) for p in np.split(loadings, cuts)]
        if args.scale:
            out_series = [p / loadings.std() for p in out_series]
        dst.add("pca/components", components)
        dst.add("pca/eigenvalues", eigenvalues)
    for i, x in enumerate(out_series):
        dst.add(f"x/{_key(i)}", x)
    _copy_side_arrays(src, dst, ("x/",))
    dst.metadata.update(src.metadata)
    dst.metadata.update({"kind": "preprocessed",
                         "preprocess": json.dumps({"detrend_degree": None if args.no_detrend else args.degree,
                                                   "variance_normalize": not args.no_normalize,
                                                   "pca_components": args.components,
                                                   "global_scale": bool(args.scale)}, sort_keys=True)})
    write_bundle(args.out, dst)
    _say(f"preprocess: {len(out_series)} subjects -> {args.out}")


def cmd_train(args):
    cfg = load_config(args.config, "train")
    data = read_bundle(args.data)
    subjects = _subject_series(data)
    chosen = parse_indices(args.subjects, len(subjects))
    dataset = [subjects[i] for i in chosen]

    resume = None
    if args.resume:
        ck = read_checkpoint(args.resume, expect=cfg)
        resume = ck.state
        _say(f"train: resuming from {args.resume} at epoch {resume.epoch}")

    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def sink(state):
        path = (ckpt_dir / f"epoch_{state.epoch:05d}.rcp") if ckpt_dir else Path(args.out)
        return write_checkpoint(path, state, cfg)

    def progress(epoch, nll):
        _say(f"epoch {epoch} nll {nll:.6f}")

    try:
        state = fit(cfg, dataset, sink=sink, resume=resume, progress=progress)
    except SingularUnmixing as exc:
        where = exc.last_checkpoint or "none"
        raise SingularUnmixing(f"{exc}; last checkpoint: {where}", last_checkpoint=exc.last_checkpoint) from None
    write_checkpoint(args.out, state, cfg)
    _say(f"train: {state.epoch} epochs, final nll "
         f"{state.history[-1] if state.history else float('nan'):.6f} -> {args.out}")


def _model_outputs(params, x):
    traces = analysis.model_traces(params, x)
    traces["sources"] = analysis.extract_sources(params, x)
    return traces


def cmd_extract(args):
    params = read_checkpoint(args.model).params
    data = read_bundle(args.data)
    subjects = _subject_series(data)
    outputs = _ordered_map(lambda x: _model_outputs(params, x), subjects)
    b = MatrixBundle()
    for kind in TRACE_KINDS:
        for i, out in enumerate(outputs):
            b.add(f"{kind}/{_key(i)}", out[kind])
    _copy_side_arrays(data, b, ("x/", "truth_sources/", "pca/"))
    b.metadata.update({"kind": "extracted", "mode": "eval, full sequence"})
    write_bundle(args.out, b)
    _say(f"extract: {len(subjects)} subjects -> {args.out}")


def cmd_fnc(args):
    src = read_bundle(args.sources)
    sources = _subject_series(src, "sources/")
    b = MatrixBundle()
    b.add("fnc", analysis.fnc(sources))
    b.metadata["kind"] = "fnc"
    write_bundle(args.out, b)
    _say(f"fnc: {len(sources)} subjects -> {args.out}")


def cmd_jacobian(args):
    params = read_checkpoint(args.model).params
    subjects = _subject_series(read_bundle(args.data))
    per_subject = _ordered_map(lambda x: analysis.next_step_jacobian(params, x), subjects)
    b = MatrixBundle()
    b.add("jbar", np.mean([m for _, m in per_subject], axis=0))
    for i, (jac, _) in enumerate(per_subject):
        b.add(f"signed/{_key(i)}", jac.mean(axis=0))
    b.metadata.update({"kind": "jacobian",
                       "convention": "J[i, j] = d mu_i(t) / d s_j(t-1); jbar = mean over time and subjects of |J|",
                       "signed": "per-subject time mean of signed J"})
    write_bundle(args.out, b)
    _say(f"jacobian: {len(subjects)} subjects -> {args.out}")


def cmd_communities(args):
    jb = read_bundle(args.jacobian)
    rho = analysis.connectivity_similarity(jb["jbar"])
    labels, q = analysis.communities_from_correlation(rho, seed=args.seed)
    b = MatrixBundle()
    b.add("similarity", rho)
    b.add("communities", labels)
    b.metadata.update({"kind": "communities", "modularity": repr(q),
                       "negative_weights": "negative correlations clipped to 0 before grouping"})
    write_bundle(args.out, b)
    _say(f"communities: {labels.max() + 1} groups, Q={q:.6f} -> {args.out}")


def _stat_table(res):
    stat = np.atleast_1d(res.statistic)
    df = np.asarray(res.df, dtype=np.float64)
    df = df.reshape(len(stat), -1) if df.size != len(stat) else df.reshape(-1, 1)
    cols = [stat[:, None], df, np.atleast_1d(res.pvalue)[:, None], np.atleast_1d(res.sign)[:, None]]
    header = ["statistic"] + (["df"] if df.shape[1] == 1 else ["df1", "df2"]) + ["pvalue", "sign"]
    return np.hstack(cols), header


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_stats(args):
    kind = args.test
    if kind == "regress":
        y = read_csv(args.y, header=args.header)
        design = read_csv(args.design, header=args.header)
        if args.intercept:
            design = np.column_stack([np.ones(len(design)), design])
        betas, resid = analysis.regress(y[:, 0] if y.shape[1] == 1 else y, design)
        table = np.vstack([betas.reshape(len(betas), -1), np.atleast_1d(resid).reshape(1, -1)])
        header = [f"y{j}" for j in range(table.shape[1])]
        _write_text(args.out, csv_text(table, header))
        _say(f"regress: rows are betas 0..{len(betas) - 1} then residual variance")
    elif kind == "ttest1":
        res = analysis.ttest_1samp(read_csv(args.input, header=args.header), args.popmean)
        _write_text(args.out, csv_text(*_stat_table(res)))
    elif kind == "ttest2":
        res = analysis.ttest_2samp(read_csv(args.a, header=args.header), read_csv(args.b, header=args.header),
                                   equal_var=args.equal_var)
        _write_text(args.out, csv_text(*_stat_table(res)))
    elif kind == "anova":
        res = analysis.anova_1way([read_csv(g, header=args.header) for g in args.groups])
        _write_text(args.out, csv_text(*_stat_table(res)))
    elif kind == "fdr":
        p = read_csv(args.pvals, header=args.header)[:, args.column]
        mask, thr = analysis.fdr_bh(p, args.q)
        _write_text(args.out, csv_text(np.column_stack([p, mask]), ["pvalue", "reject"]))
        _say(f"fdr: {int(mask.sum())} of {len(p)} rejected at q={args.q}, threshold {thr:.6g}")
    elif kind == "statecorr":
        traces = _subject_series(read_bundle(args.traces), f"{args.kind}/")
        states = _subject_series(read_bundle(args.states), "states/")
        r = analysis.state_correlation(traces, states)
        _write_text(args.out, csv_text(r))
        _say("statecorr: state codes correlated as raw numbers 1..K")


def _group_difference_rows(extracted, q):
    """Welch tests of state-tracking correlations between the two groups."""
    labels = extracted["labels"].astype(int)
    states = extracted.series("states/")
    rows, names = [], []
    for kind in TRACE_KINDS:
        r = analysis.state_correlation(extracted.series(f"{kind}/"), states)
        for u in range(r.shape[1]):
            a, b = r[labels == 0, u], r[labels == 1, u]
            a, b = a[np.isfinite(a)], b[np.isfinite(b)]
            try:
                res = analysis.ttest_2samp(a, b)
            except (NumericalError, ConfigError):
                continue
            rows.append([TRACE_KINDS.index(kind), u, res.statistic, res.pvalue])
            names.append(kind)
    if not rows:
        return None
    table = np.array(rows, dtype=np.float64)
    mask, _ = analysis.fdr_bh(table[:, 3], q)
    with np.errstate(divide="ignore"):
        neglog = -np.log10(table[:, 3])
    return np.column_stack([table, neglog, mask])


def cmd_report(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, text):
        (out / name).write_text(text, encoding="utf-8")
        written.append(name)

    if args.fnc:
        f = read_bundle(args.fnc)["fnc"]
        emit("fnc.csv", csv_text(f))
        emit("fnc.svg", svg_heatmap(f, [f"IC{i}" for i in range(len(f))]))

    if args.jacobian:
        jb = read_bundle(args.jacobian)
        jbar = jb["jbar"]
        emit("jacobian.csv", csv_text(jbar))
        top = float(np.max(jbar)) if jbar.size else 1.0
        emit("jacobian.svg", svg_heatmap(jbar, [f"IC{i}" for i in range(len(jbar))], -top, top))
        communities = None
        if args.communities:
            communities = read_bundle(args.communities)["communities"].astype(int)
        signed = jb.series("signed/")
        weights = jbar.copy()
        if len(signed) >= 2:
            # keep edges whose signed per-subject means differ from zero after BH
            res = analysis.ttest_1samp(np.stack([s.ravel() for s in signed]))
            p = np.where(np.isfinite(res.pvalue), res.pvalue, 1.0)
            mask, _ = analysis.fdr_bh(p, args.q)
            weights = np.where(mask.reshape(jbar.shape), jbar, 0.0)
            emit("jacobian_pvalues.csv", csv_text(p.reshape(jbar.shape)))
        graph = analysis.ConnectivityGraph.from_matrix(weights, communities=communities)
        emit("connectivity.dot", export_dot(graph, args.threshold))

    if args.extracted:
        ex = read_bundle(args.extracted)
        if "labels" in ex and ex.names("states/"):
            table = _group_difference_rows(ex, args.q)
            if table is not None:
                emit("group_differences.csv",
                     csv_text(table, ["kind", "unit", "t", "pvalue", "neg_log10_p", "reject"]))

    manifest = "kind codes: " + ", ".join(f"{i}={k}" for i, k in enumerate(TRACE_KINDS)) + "\n"
    manifest += "".join(f"{name}\n" for name in sorted(written))
    emit("MANIFEST.txt", manifest)
    _say(f"report: {len(written)} files -> {out}")


# -- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="rica", description="RNN-ICA toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a two-group cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="detrend, variance-normalize and optionally reduce with PCA")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--degree", type=int, default=4, help="detrending polynomial degree")
    s.add_argument("--components", type=int, help="keep this many principal components")
    s.add_argument("--scale", action="store_true", help="divide PCA loadings by their global std")
    s.add_argument("--no-detrend", action="store_true")
    s.add_argument("--no-normalize", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="fit the model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="model.rcp")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint-dir", help="write periodic checkpoints here instead of over --out")
    s.add_argument("--subjects", help="subject indices, e.g. 0:40")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="sources and model traces for every subject")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("fnc", help="subject-averaged source cross-correlation")
    s.add_argument("--sources", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fnc)

    s = sub.add_parser("jacobian", help="next-step Jacobian connectivity")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_jacobian)

    s = sub.add_parser("communities", help="group components by Jacobian profile similarity")
    s.add_argument("--jacobian", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_communities)

    s = sub.add_parser("stats", help="regression and hypothesis tests on CSV tables")
    tests = s.add_subparsers(dest="test", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--out", help="output CSV (default: standard output)")
    common.add_argument("--header", action="store_true", help="input CSVs have a header row")
    t = tests.add_parser("regress", parents=[common])
    t.add_argument("--y", required=True)
    t.add_argument("--design", required=True)
    t.add_argument("--intercept", action="store_true", help="prepend an intercept column")
    t = tests.add_parser("ttest1", parents=[common])
    t.add_argument("--input", required=True)
    t.add_argument("--popmean", type=float, default=0.0)
    t = tests.add_parser("ttest2", parents=[common])
    t.add_argument("--a", required=True)
    t.add_argument("--b", required=True)
    t.add_argument("--equal-var", action="store_true")
    t = tests.add_parser("anova", parents=[common])
    t.add_argument("--groups", nargs="+", required=True)
    t = tests.add_parser("fdr", parents=[common])
    t.add_argument("--pvals", required=True)
    t.add_argument("--q", type=float, default=0.05)
    t.add_argument("--column", type=int, default=0)
    t = tests.add_parser("statecorr", parents=[common])
    t.add_argument("--traces", required=True, help="bundle from `rica extract`")
    t.add_argument("--states", required=True, help="bundle holding states/NNNN")
    t.add_argument("--kind", choices=TRACE_KINDS, default="hidden")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("report", help="CSV tables, SVG heatmaps and DOT graphs")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--fnc")
    s.add_argument("--jacobian")
    s.add_argument("--communities")
    s.add_argument("--extracted", help="bundle from `rica extract` (with labels and states)")
    s.add_argument("--q", type=float, default=0.001, help="FDR level")
    s.add_argument("--threshold", type=float, default=0.0, help="minimum |weight| for DOT edges")
    s.set_defaults(func=cmd_report)
    return p


def exit_code(exc):
    if isinstance(exc, NumericalError):
        return 4
    if isinstance(exc, DataFormatError):
        return 3
    return 2


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        worker_count()
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _say(f"error: {exc}")
        return 2
    except RicaError as exc:
        _say(f"error: {type(exc).__name__}: {exc}")
        return exit_code(exc)
    except (ValueError, TypeError) as exc:
        _say(f"error: {exc}")
        return 2
    except OSError as exc:
        _say(f"error: {exc.filename or ''}: {exc.strerror}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
