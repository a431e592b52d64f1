"""Bayesian multivariate multilevel workload models.

Fits hierarchical generalized linear models with Kronecker-structured
random-effect covariances by MCMC and derives workload-prediction outputs:
credible intervals, variance shares, DIC model ladders, and NIS/RSUR
utilization indices.
"""

from .covariance import (
    CovarianceAssembly,
    IwPrior,
    KroneckerBlock,
    assemble_block_diagonal,
    kronecker_product,
    sample_inverse_wishart,
    scatter_matrix,
    update_parametric_block,
)
from .design import (
    DesignInfo,
    FixedDesign,
    ModelInputs,
    RandomDesign,
    StackedData,
    build_fixed_design,
    build_model_inputs,
    build_random_design,
    stack_multivariate,
)
from .diagnostics import (
    PosteriorSummary,
    QQTable,
    deviance,
    dic,
    effective_sample_size,
    gelman_rubin,
    hpd_interval,
    qq_quantiles,
    summarize_draws,
)
from .inference import (
    IndexRow,
    ModelLadder,
    PredictionTable,
    compare_models,
    icc,
    nis,
    predict_portfolio,
    rsur,
    summarize_effects,
)
from .mcmc import ChainOutput, FitResult, McmcOptions, fit_model, run_chain
from .modelspec import (
    ModelSpec,
    parse_mcmc_section,
    parse_model_config,
    parse_preprocess_rules,
    parse_table_schema,
)
from .simulate import TruthBlock, TruthRecord, generate_dataset, truth_config
from .store import load_fit, save_fit
from .tabular import (
    HierarchyIndex,
    ObservationTable,
    PreprocessRules,
    TableSchema,
    build_hierarchy,
    ingest_table,
    preprocess,
)

__version__ = "0.1.0"

__all__ = [
    "CovarianceAssembly", "IwPrior", "KroneckerBlock", "assemble_block_diagonal",
    "kronecker_product", "sample_inverse_wishart", "scatter_matrix",
    "update_parametric_block",
    "DesignInfo", "FixedDesign", "ModelInputs", "RandomDesign", "StackedData",
    "build_fixed_design", "build_model_inputs", "build_random_design",
    "stack_multivariate",
    "PosteriorSummary", "QQTable", "deviance", "dic", "effective_sample_size",
    "gelman_rubin", "hpd_interval", "qq_quantiles", "summarize_draws",
    "IndexRow", "ModelLadder", "PredictionTable", "compare_models", "icc", "nis",
    "predict_portfolio", "rsur", "summarize_effects",
    "ChainOutput", "FitResult", "McmcOptions", "fit_model", "run_chain",
    "ModelSpec", "parse_mcmc_section", "parse_model_config",
    "parse_preprocess_rules", "parse_table_schema",
    "TruthBlock", "TruthRecord", "generate_dataset", "truth_config",
    "load_fit", "save_fit",
    "HierarchyIndex", "ObservationTable", "PreprocessRules", "TableSchema",
    "build_hierarchy", "ingest_table", "preprocess",
]
