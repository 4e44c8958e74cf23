"""Batch orchestration: fit every gene of a counts table.

Each gene runs the fitting cascade (PT mixed model with up to two
starting-value strategies, then the NB mixed model) and the requested
Wald tests.  Genes are dispatched to a process pool; results are
reassembled in input order and Benjamini-Hochberg adjustment is applied
per hypothesis across genes, so the output is byte-identical for any
worker count.  Per-gene failures are recorded, never fatal.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .glmm import FitOptions, fit_gene_cascade
from .inference import TestError, TestRefusedError, bh_adjust, wald_test
from .io import CountsTable, SampleSheet, build_dataset, format_float, parse_hypothesis

__all__ = ["GeneResult", "BatchResult", "run_fit_all", "write_results_tsv", "write_results_json"]


@dataclass
class GeneResult:
    """Per-gene fit summary plus raw test p-values."""

    gene: str
    status: str            # 'ok' | 'failed' | 'error'
    model_tag: str
    converged: bool
    loglik: float
    estimates: dict
    std_errors: dict
    p_values: dict         # hypothesis name -> raw p (NaN if unavailable)
    n_loglik_evals: int
    message: str = ""


@dataclass
class BatchResult:
    counts_genes: list
    hypotheses: list
    results: list          # GeneResult, in counts order
    adjusted: dict         # hypothesis name -> np.ndarray aligned with results

    @property
    def n_failed(self) -> int:
        return sum(r.status != "ok" for r in self.results)


def _fit_one_gene(args):
    idx, gene, y, sheet, formula, hyp_specs, offsets, options = args
    try:
        data = build_dataset(y, sheet, formula, offsets=offsets)
        fit = fit_gene_cascade(data, options)
        estimates, ses, pvals = {}, {}, {}
        status = "ok" if fit.converged else "failed"
        if fit.converged:
            for name, b in zip(fit.coef_names, fit.theta_hat.beta):
                estimates[f"beta_{name}"] = float(b)
            estimates["dispersion"] = float(fit.theta_hat.dispersion)
            estimates["power"] = float(fit.theta_hat.power)
            estimates["ranef_var"] = float(fit.theta_hat.ranef_var)
            if fit.vcov is not None:
                for name, se in zip(fit.param_names, np.sqrt(np.diag(fit.vcov))):
                    ses[f"se_{name}"] = float(se)
        for hname, spec in hyp_specs:
            p = float("nan")
            if fit.converged:
                try:
                    p = wald_test(fit, parse_hypothesis(spec, fit.coef_names)).p_value
                except (TestRefusedError, TestError):
                    p = float("nan")
            pvals[hname] = p
        return idx, GeneResult(
            gene=gene, status=status, model_tag=fit.model_tag,
            converged=fit.converged, loglik=float(fit.loglik),
            estimates=estimates, std_errors=ses, p_values=pvals,
            n_loglik_evals=fit.n_loglik_evals,
        )
    except Exception as e:  # per-gene failures never abort the batch
        return idx, GeneResult(
            gene=gene, status="error", model_tag="", converged=False,
            loglik=float("nan"), estimates={}, std_errors={},
            p_values={h: float("nan") for h, _ in hyp_specs},
            n_loglik_evals=0, message=f"{type(e).__name__}: {e}",
        )


def run_fit_all(counts: CountsTable, sheet: SampleSheet, formula: str,
                hypotheses, options: FitOptions | None = None,
                offsets: dict | None = None, workers: int = 1,
                progress=None) -> BatchResult:
    """Fit the cascade and test hypotheses for every gene.

    Args:
        counts: gene-by-sample table; columns must match the sheet.
        sheet: per-sample covariates (will be reordered to the counts
            columns).
        formula: fixed-effect specification, e.g. "group + time".
        hypotheses: list of (name, spec-string) pairs; specs as accepted
            by parse_hypothesis.
        options: fitting options shared by all genes.
        offsets: optional {sample: offset}; bypasses normalization.
        workers: process count; the result is identical for any value.
        progress: optional callable(done, total) side channel.

    Schema problems (mismatched samples, unknown covariates) raise before
    any fitting starts.
    """
    options = options or FitOptions()
    if set(counts.samples) != set(sheet.samples):
        raise ValueError("counts columns and sample sheet ids do not match")
    sheet = sheet.reorder(counts.samples)
    # validate the design and hypotheses once up front
    from .io import build_design

    _, coef_names = build_design(sheet, formula)
    hyp_specs = []
    for name, spec in hypotheses:
        parse_hypothesis(spec, coef_names)
        hyp_specs.append((name, spec))

    tasks = [
        (i, gene, counts.counts[i], sheet, formula, hyp_specs, offsets, options)
        for i, gene in enumerate(counts.genes)
    ]
    if workers <= 1:
        results = []
        for t in tasks:
            results.append(_fit_one_gene(t))
            if progress:
                progress(len(results), len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = []
            for r in pool.map(_fit_one_gene, tasks, chunksize=1):
                results.append(r)
                if progress:
                    progress(len(results), len(tasks))
    results.sort(key=lambda t: t[0])
    ordered = [r for _, r in results]
    adjusted = {}
    for hname, _ in hyp_specs:
        raw = np.array([r.p_values[hname] for r in ordered])
        with np.errstate(invalid="ignore"):
            adjusted[hname] = bh_adjust(raw)
    return BatchResult(
        counts_genes=list(counts.genes),
        hypotheses=[h for h, _ in hyp_specs],
        results=ordered,
        adjusted=adjusted,
    )


def write_results_tsv(batch: BatchResult, path):
    """One row per gene; float columns printed shortest-round-trip."""
    est_keys, se_keys = [], []
    for r in batch.results:
        for k in r.estimates:
            if k not in est_keys:
                est_keys.append(k)
        for k in r.std_errors:
            if k not in se_keys:
                se_keys.append(k)
    header = (["gene", "status", "model_tag", "converged", "loglik", "n_loglik_evals"]
              + est_keys + se_keys
              + [f"p_{h}" for h in batch.hypotheses]
              + [f"padj_{h}" for h in batch.hypotheses])
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(header) + "\n")
        for i, r in enumerate(batch.results):
            row = [r.gene, r.status, r.model_tag, str(int(r.converged)),
                   format_float(r.loglik), str(r.n_loglik_evals)]
            row += [format_float(r.estimates[k]) if k in r.estimates else "NA" for k in est_keys]
            row += [format_float(r.std_errors[k]) if k in r.std_errors else "NA" for k in se_keys]
            row += [format_float(r.p_values[h]) for h in batch.hypotheses]
            row += [format_float(batch.adjusted[h][i]) for h in batch.hypotheses]
            fh.write("\t".join(row) + "\n")


def write_results_json(batch: BatchResult, path):
    """Full per-gene diagnostics sidecar."""
    payload = {
        "hypotheses": batch.hypotheses,
        "n_failed": batch.n_failed,
        "genes": [
            {
                "gene": r.gene,
                "status": r.status,
                "model_tag": r.model_tag,
                "converged": r.converged,
                "loglik": None if np.isnan(r.loglik) else r.loglik,
                "estimates": r.estimates,
                "std_errors": r.std_errors,
                "p_values": {k: (None if np.isnan(v) else v) for k, v in r.p_values.items()},
                "p_adjusted": {
                    h: (None if np.isnan(batch.adjusted[h][i]) else float(batch.adjusted[h][i]))
                    for h in batch.hypotheses
                },
                "n_loglik_evals": r.n_loglik_evals,
                "message": r.message,
            }
            for i, r in enumerate(batch.results)
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
