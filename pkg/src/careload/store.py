"""File formats: draw files, fit metadata, table writing. All writes are
atomic (temp file in the target directory, then rename).

Draw files are delimited text, one row per stored draw, columns labeled
gamma:<response>:<term>, G:<block>:[slot_i]x[slot_j], R:[slot_i]x[slot_j],
deviance. Random-effect draws live in a companion effects file with columns
eps:<block>:<group>:<slot>. Everything else sits in meta.json.
"""

from __future__ import annotations

import io
import json
import os
import tempfile

import numpy as np

from .design import BlockLayout, DesignInfo
from .errors import SchemaError
from .mcmc import ChainOutput, FitResult, McmcOptions
from .modelspec import ExpandedBlock, ModelSpec
from .tabular import NUMERIC, ObservationTable

FORMAT_VERSION = 1


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_matrix_csv(labels: list[str], matrix: np.ndarray) -> str:
    out = io.StringIO()
    out.write(",".join(labels) + "\n")
    for row in np.atleast_2d(matrix):
        out.write(",".join(format(v, ".17g") for v in row) + "\n")
    return out.getvalue()


def read_matrix_csv(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        labels = header.split(",")
        matrix = np.loadtxt(fh, delimiter=",", ndmin=2)
    if matrix.size and matrix.shape[1] != len(labels):
        raise SchemaError(f"draw file {path}: {matrix.shape[1]} columns vs "
                          f"{len(labels)} labels")
    return labels, matrix


def chain_draw_columns(chain: ChainOutput) -> tuple[list[str], np.ndarray]:
    labels = list(chain.gamma_labels)
    parts = [chain.gamma_draws]
    for label in chain.block_labels:
        labels.extend(chain.block_labels[label])
        parts.append(chain.block_draws[label])
    labels.extend(chain.residual_labels)
    parts.append(chain.residual_draws)
    labels.append("deviance")
    parts.append(chain.deviance[:, None])
    return labels, np.hstack(parts)


def table_to_csv(table: ObservationTable, column_order: list[str] | None = None) -> str:
    names = column_order or sorted(table.columns)
    out = io.StringIO()
    out.write(",".join(names) + "\n")
    cols = [table.columns[n] for n in names]
    for i in range(table.n_rows):
        cells = []
        for col in cols:
            v = col.values[i]
            if col.kind == NUMERIC:
                cells.append("NA" if np.isnan(v) else format(v, ".17g"))
            else:
                cells.append("NA" if v is None else str(v))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def save_fit(fit: FitResult, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    for chain in fit.chains:
        labels, matrix = chain_draw_columns(chain)
        atomic_write_text(os.path.join(outdir, f"draws_chain{chain.chain_index:02d}.csv"),
                          format_matrix_csv(labels, matrix))
        if chain.eps_draws is not None and chain.eps_draws.shape[1] > 0:
            atomic_write_text(
                os.path.join(outdir, f"effects_chain{chain.chain_index:02d}.csv"),
                format_matrix_csv(chain.eps_labels, chain.eps_draws))
    meta = {
        "format_version": FORMAT_VERSION,
        "options": fit.options.to_dict(),
        "data_hash": fit.data_hash,
        "spec": fit.spec.to_dict(),
        "info": fit.info.to_dict(),
        "layouts": [
            {"spec": layout.spec.to_dict(), "groups": list(layout.groups),
             "col_start": layout.col_start, "col_stop": layout.col_stop}
            for layout in fit.layouts
        ],
        "fixed_slots": [[s.term, s.response] for s in fit.fixed_slots],
        "dic": fit.dic_stats,
        "chain_stats": [
            {"chain_index": c.chain_index, "deviance_at_mean": c.deviance_at_mean,
             "n_stored": c.n_stored}
            for c in fit.chains
        ],
        "config_text": fit.config_text,
    }
    atomic_write_text(os.path.join(outdir, "meta.json"),
                      json.dumps(meta, indent=2, sort_keys=True))


def _split_chain_columns(labels: list[str], matrix: np.ndarray, meta: dict) -> dict:
    gamma_labels = [lab for lab in labels if lab.startswith("gamma:")]
    block_names = [layout["spec"]["label"] for layout in meta["layouts"]]
    block_labels = {
        name: [lab for lab in labels if lab.startswith(f"G:{name}:")] for name in block_names}
    residual_labels = [lab for lab in labels if lab.startswith("R:")]
    index = {lab: i for i, lab in enumerate(labels)}
    out = {
        "gamma_labels": gamma_labels,
        "gamma_draws": matrix[:, [index[lab] for lab in gamma_labels]],
        "block_labels": block_labels,
        "block_draws": {
            name: matrix[:, [index[lab] for lab in labs]]
            for name, labs in block_labels.items()},
        "residual_labels": residual_labels,
        "residual_draws": matrix[:, [index[lab] for lab in residual_labels]],
        "deviance": matrix[:, index["deviance"]],
    }
    return out


def load_fit(outdir: str) -> FitResult:
    meta_path = os.path.join(outdir, "meta.json")
    if not os.path.exists(meta_path):
        raise SchemaError(f"{outdir} does not contain a fit (meta.json missing)")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = ModelSpec.from_dict(meta["spec"])
    info = DesignInfo.from_dict(meta["info"])
    options = McmcOptions.from_dict(meta["options"])
    layouts = tuple(
        BlockLayout(
            spec=ExpandedBlock.from_dict(layout["spec"]),
            groups=tuple(layout["groups"]),
            col_start=layout["col_start"],
            col_stop=layout["col_stop"],
        )
        for layout in meta["layouts"]
    )
    from .modelspec import Slot

    fixed_slots = tuple(Slot(t, r) for t, r in meta["fixed_slots"])
    p = len(spec.responses)
    chains = []
    for stats in meta["chain_stats"]:
        idx = stats["chain_index"]
        labels, matrix = read_matrix_csv(os.path.join(outdir, f"draws_chain{idx:02d}.csv"))
        parts = _split_chain_columns(labels, matrix, meta)
        effects_path = os.path.join(outdir, f"effects_chain{idx:02d}.csv")
        eps_labels: list[str] = []
        eps_draws = None
        if os.path.exists(effects_path):
            eps_labels, eps_draws = read_matrix_csv(effects_path)
        block_pairs = {}
        for layout in layouts:
            d = layout.d
            block_pairs[layout.label] = [(i, j) for i in range(d) for j in range(i, d)]
        r_pairs = [(i, j) for i in range(p) for j in range(i, p)]
        residual_mean_tri = parts["residual_draws"].mean(axis=0)
        residual_mean = np.zeros((p, p))
        for col, (i, j) in enumerate(r_pairs):
            residual_mean[i, j] = residual_mean[j, i] = residual_mean_tri[col]
        chains.append(ChainOutput(
            chain_index=idx,
            seed=options.seed,
            options=options,
            gamma_labels=parts["gamma_labels"],
            gamma_draws=parts["gamma_draws"],
            block_labels=parts["block_labels"],
            block_draws=parts["block_draws"],
            block_pairs=block_pairs,
            residual_labels=parts["residual_labels"],
            residual_draws=parts["residual_draws"],
            deviance=parts["deviance"],
            eps_labels=eps_labels,
            eps_draws=eps_draws,
            gamma_mean=parts["gamma_draws"].mean(axis=0),
            eps_mean=eps_draws.mean(axis=0) if eps_draws is not None else np.empty(0),
            eta_mean=np.empty(0),
            residual_mean=residual_mean,
            deviance_at_mean=stats["deviance_at_mean"],
            data_hash=meta["data_hash"],
            mh_step_sizes=None,
        ))
    return FitResult(
        spec=spec,
        info=info,
        fixed_slots=fixed_slots,
        layouts=layouts,
        options=options,
        data_hash=meta["data_hash"],
        chains=chains,
        dic_stats=meta["dic"],
        config_text=meta.get("config_text"),
    )
