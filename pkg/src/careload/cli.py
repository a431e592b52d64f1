"""Batch front end: simulate -> fit -> diagnose -> predict -> indices -> compare.

Exit status: 0 on success, 1 on usage/validation errors (with a one-line
hint), 2 on numeric or model failures. All outputs are written atomically.
The default output directory comes from --out or the CARELOAD_OUTDIR
environment variable.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys

import numpy as np

from . import diagnostics, inference, store
from .design import build_model_inputs
from .errors import CareloadError, ValidationError
from .mcmc import McmcOptions, fit_model
from .modelspec import (
    parse_mcmc_section,
    parse_model_config,
    parse_preprocess_rules,
    parse_table_schema,
)
from .simulate import TruthRecord, generate_dataset, truth_config
from .tabular import ingest_table, preprocess

log = logging.getLogger(__name__)

PAPER_PROFILE = {"iterations": 50000, "burnin": 10000, "thin": 25}
PAPER_LADDER_LABELS = ["Model 1", "Model 2", "Model 3", "Model 4", "Model 5", "Model 6"]


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); usage errors are 1
        raise UsageError(f"{message} (try: careload {self.prog.split()[-1]} --help)")


def _default_out(value: str | None) -> str:
    if value:
        return value
    return os.environ.get("CARELOAD_OUTDIR", ".")


def _read_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _load_table(config_text: str, data_path: str):
    schema = parse_table_schema(config_text)
    table = ingest_table(_read_text(data_path), schema)
    rules = parse_preprocess_rules(config_text)
    table = preprocess(table, rules)
    return schema, table


def _mcmc_options(config_text: str, args) -> McmcOptions:
    kwargs = parse_mcmc_section(config_text)
    if getattr(args, "profile", None) == "paper":
        kwargs.update(PAPER_PROFILE)
    for key in ("iterations", "burnin", "thin", "chains", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            kwargs[key] = value
    if getattr(args, "serial", False):
        kwargs["serial"] = True
    try:
        return McmcOptions(**kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad MCMC settings: {exc}") from None


def _cmd_simulate(args) -> int:
    truth = TruthRecord.from_json(_read_text(args.truth))
    table, hierarchy = generate_dataset(truth)
    outdir = _default_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    order = (["patient", "team", "facility"] + list(truth.covariates)
             + list(truth.categoricals) + list(truth.responses))
    store.atomic_write_text(os.path.join(outdir, "data.csv"),
                            store.table_to_csv(table, order))
    hier = io.StringIO()
    hier.write("patient,team,facility\n")
    for patient, team in sorted(hierarchy.patient_team.items()):
        hier.write(f"{patient},{team},{hierarchy.team_facility[team]}\n")
    store.atomic_write_text(os.path.join(outdir, "hierarchy.csv"), hier.getvalue())
    store.atomic_write_text(os.path.join(outdir, "truth.json"), truth.to_json() + "\n")
    store.atomic_write_text(os.path.join(outdir, "model.cfg"), truth_config(truth))
    print(f"simulated {table.n_rows} subjects "
          f"({hierarchy.n_teams} teams, {hierarchy.n_facilities} facilities) -> {outdir}")
    return 0


def _cmd_fit(args) -> int:
    config_text = _read_text(args.config)
    schema, table = _load_table(config_text, args.data)
    spec = parse_model_config(config_text, table)
    options = _mcmc_options(config_text, args)
    inputs = build_model_inputs(spec, table, schema.hierarchy_keys)
    if args.dump_design:
        os.makedirs(args.dump_design, exist_ok=True)
        store.atomic_write_text(
            os.path.join(args.dump_design, "fixed_design.csv"),
            store.format_matrix_csv(inputs.fixed.labels, inputs.fixed.matrix))
        w_labels = [f"{layout.label}:{g}:{t or r}@{r}" if t else f"{layout.label}:{g}:{r}"
                    for layout in inputs.random.layouts
                    for g, t, r in layout.column_meaning()]
        store.atomic_write_text(
            os.path.join(args.dump_design, "random_design.csv"),
            store.format_matrix_csv(w_labels, inputs.random.matrix.toarray()))
    fit = fit_model(inputs, options, config_text=config_text)
    outdir = _default_out(args.out)
    store.save_fit(fit, outdir)
    print(f"fit: {options.chains} chain(s) x {options.n_stored} stored draws, "
          f"DIC {fit.dic:.2f} -> {outdir}")
    return 0


def _cmd_diagnose(args) -> int:
    fit = store.load_fit(args.fit)
    outdir = _default_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    rows = ["parameter,mean,sd,hpd_lower,hpd_upper,significance,ess,rhat"]
    per_chain: dict[str, list[np.ndarray]] = {}
    labels_all: list[str] = []
    for chain in fit.chains:
        labels, matrix = store.chain_draw_columns(chain)
        for j, lab in enumerate(labels):
            if lab == "deviance":
                continue
            per_chain.setdefault(lab, []).append(matrix[:, j])
            if lab not in labels_all:
                labels_all.append(lab)
    for lab in labels_all:
        draws = np.concatenate(per_chain[lab])
        summary = diagnostics.summarize_draws(draws)
        try:
            ess = diagnostics.effective_sample_size(draws)
            ess_txt = format(ess, ".1f")
        except CareloadError:
            ess_txt = ""
        rhat_txt = ""
        if len(per_chain[lab]) >= 2:
            try:
                rhat_txt = format(diagnostics.gelman_rubin(per_chain[lab]), ".4f")
            except CareloadError:
                rhat_txt = ""
        rows.append(f"{lab},{summary.mean:.6g},{summary.sd:.6g},{summary.hpd_lower:.6g},"
                    f"{summary.hpd_upper:.6g},{summary.significance},{ess_txt},{rhat_txt}")
    store.atomic_write_text(os.path.join(outdir, "summary.csv"), "\n".join(rows) + "\n")
    dic_info = fit.dic_stats
    store.atomic_write_text(
        os.path.join(outdir, "dic.csv"),
        "dbar,d_at_mean,dic\n"
        f"{dic_info['dbar']:.6g},{dic_info['d_at_mean']:.6g},{dic_info['dic']:.6g}\n")

    if args.qq:
        if not args.data or not fit.config_text:
            raise UsageError("--qq needs --data and a fit saved with its config")
        _, table = _load_table(fit.config_text, args.data)
        rng = np.random.default_rng(args.seed or 0)
        for spec_item in args.qq:
            if ":" not in spec_item:
                raise UsageError(f"--qq expects column:family, got {spec_item!r}")
            col, family = spec_item.split(":", 1)
            qq = diagnostics.qq_quantiles(table.numeric(col), family,
                                          n_boot=args.boot, rng=rng)
            body = ["theoretical,sample,envelope_lower,envelope_upper"]
            for k in range(qq.sample.size):
                body.append(f"{qq.theoretical[k]:.10g},{qq.sample[k]:.10g},"
                            f"{qq.envelope_lower[k]:.10g},{qq.envelope_upper[k]:.10g}")
            store.atomic_write_text(os.path.join(outdir, f"qq_{col}_{family}.csv"),
                                    "\n".join(body) + "\n")
    print(f"diagnostics -> {outdir}")
    return 0


def _prepare_prediction(args):
    fit = store.load_fit(args.fit)
    if not fit.config_text:
        raise UsageError("fit was saved without its config; cannot ingest new data")
    schema, table = _load_table(fit.config_text, args.data)
    return fit, schema, table


def _write_predictions(path: str, pred: inference.PredictionTable) -> None:
    rows = ["subject,response,point,lower,upper"]
    for i in range(pred.n_subjects):
        for j, resp in enumerate(pred.responses):
            rows.append(f"{pred.subjects[i]},{resp},{pred.point[i, j]:.10g},"
                        f"{pred.lower[i, j]:.10g},{pred.upper[i, j]:.10g}")
    store.atomic_write_text(path, "\n".join(rows) + "\n")


def _cmd_predict(args) -> int:
    fit, schema, table = _prepare_prediction(args)
    rng = np.random.default_rng(args.seed or 0)
    pred = inference.predict_portfolio(fit, table, include_random=not args.no_random,
                                       level=args.level, rng=rng)
    outdir = _default_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    _write_predictions(os.path.join(outdir, "predictions.csv"), pred)
    print(f"predictions for {pred.n_subjects} subjects -> {outdir}/predictions.csv")
    return 0


def _cmd_indices(args) -> int:
    fit, schema, table = _prepare_prediction(args)
    rng = np.random.default_rng(args.seed or 0)
    pred_with = inference.predict_portfolio(fit, table, include_random=True,
                                            level=args.level, rng=rng)
    pred_without = inference.predict_portfolio(fit, table, include_random=False,
                                               level=args.level)
    key = schema.team_key if args.group == "team" else schema.facility_key
    groups = table.labels(key)
    nis_rows = inference.nis(pred_with, groups)
    rsur_rows = inference.rsur(pred_with, pred_without, groups)
    rsur_map = {(r.group, r.response): r.value for r in rsur_rows}
    lines = ["group,response,n_subjects,nis,rsur"]
    for row in nis_rows:
        lines.append(f"{row.group},{row.response},{row.n_subjects},"
                     f"{row.value:.10g},{rsur_map[(row.group, row.response)]:.10g}")
    outdir = _default_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    store.atomic_write_text(os.path.join(outdir, "indices.csv"), "\n".join(lines) + "\n")
    print(f"{args.group} indices -> {outdir}/indices.csv")
    return 0


def _cmd_compare(args) -> int:
    fits = [store.load_fit(d) for d in args.fits]
    if args.labels:
        labels = [s.strip() for s in args.labels.split(",")]
        if len(labels) != len(fits):
            raise UsageError(f"{len(labels)} labels for {len(fits)} fits")
    elif args.profile == "paper" and len(fits) <= len(PAPER_LADDER_LABELS):
        labels = PAPER_LADDER_LABELS[: len(fits)]
    else:
        labels = [f"model {i + 1}" for i in range(len(fits))]
    ladder = inference.compare_models(list(zip(labels, fits)))
    lines = ["model,dic,delta_dic,preferred"]
    for entry in ladder.entries:
        delta = "" if entry.delta is None else format(entry.delta, ".6g")
        lines.append(f"{entry.label},{entry.dic:.6g},{delta},"
                     f"{'yes' if entry.preferred else 'no'}")
    outdir = _default_out(args.out)
    os.makedirs(outdir, exist_ok=True)
    store.atomic_write_text(os.path.join(outdir, "ladder.csv"), "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="careload",
                     description="Bayesian multivariate multilevel workload models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset from a truth file")
    p_sim.add_argument("--truth", required=True, help="TruthRecord JSON path")
    p_sim.add_argument("--out", help="output directory")

    p_fit = sub.add_parser("fit", help="fit a model by MCMC")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--out", help="output directory")
    p_fit.add_argument("--iterations", type=int)
    p_fit.add_argument("--burnin", type=int)
    p_fit.add_argument("--thin", type=int)
    p_fit.add_argument("--chains", type=int)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--serial", action="store_true",
                       help="run chains sequentially even when chains > 1")
    p_fit.add_argument("--profile", choices=["paper"],
                       help="apply the published MCMC settings (50000/10000/25)")
    p_fit.add_argument("--dump-design", metavar="DIR",
                       help="write labeled X and W matrices for debugging")

    p_diag = sub.add_parser("diagnose", help="posterior summaries and QQ/trace data")
    p_diag.add_argument("--fit", required=True, help="fit output directory")
    p_diag.add_argument("--out", help="output directory")
    p_diag.add_argument("--data", help="data file for QQ checks")
    p_diag.add_argument("--qq", action="append", metavar="COLUMN:FAMILY",
                        help="emit a QQ table (family: lognormal, gaussian, gamma)")
    p_diag.add_argument("--boot", type=int, default=200, help="bootstrap replicates")
    p_diag.add_argument("--seed", type=int)

    p_pred = sub.add_parser("predict", help="predictive portfolio with credible intervals")
    p_pred.add_argument("--fit", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--out", help="output directory")
    p_pred.add_argument("--level", type=float, default=0.95)
    p_pred.add_argument("--no-random", action="store_true",
                        help="zero the random effects (reference setting)")
    p_pred.add_argument("--seed", type=int, help="seed for unseen-group effect draws")

    p_idx = sub.add_parser("indices", help="NIS and RSUR per team or facility")
    p_idx.add_argument("--fit", required=True)
    p_idx.add_argument("--data", required=True)
    p_idx.add_argument("--out", help="output directory")
    p_idx.add_argument("--group", choices=["team", "facility"], default="facility")
    p_idx.add_argument("--level", type=float, default=0.95)
    p_idx.add_argument("--seed", type=int)

    p_cmp = sub.add_parser("compare", help="DIC ladder over fits of the same data")
    p_cmp.add_argument("fits", nargs="+", help="fit output directories, in ladder order")
    p_cmp.add_argument("--labels", help="comma-separated model labels")
    p_cmp.add_argument("--profile", choices=["paper"],
                       help="label the ladder Model 1..6")
    p_cmp.add_argument("--out", help="output directory")
    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "diagnose": _cmd_diagnose,
    "predict": _cmd_predict,
    "indices": _cmd_indices,
    "compare": _cmd_compare,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CareloadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
