"""Desk-scale experiments: λ sweep, ℓ1 unveiling and direct design."""

import logging
from dataclasses import replace
from typing import Any, Dict, List, Mapping, Optional, Sequence

from iss_rnn.config import DataConfig, ExperimentConfig, ModelConfig
from iss_rnn.corpus import CharCorpus, build_char_corpus, load_corpus
from iss_rnn.models import LanguageModel, LstmLanguageModel, RhnLanguageModel
from iss_rnn.numerics import Rng
from iss_rnn.topology import detect_zero_groups
from iss_rnn.training import TrainMetrics, train_language_model

logger = logging.getLogger(__name__)

LAMBDA_GRID = (2e-4, 5e-4, 1e-3)
L1_SEEDS = (1, 2, 3, 4, 5)
PPL_TOLERANCE = 0.05
EXPERIMENT_KINDS = ('lambda-sweep', 'l1-unveil', 'direct-design')


def build_model(model_cfg: ModelConfig, vocab_size: int, seed: int, threads: int = 1) -> LanguageModel:
    """A freshly initialized model; parameters come from stream 0 of ``seed``."""
    rng = Rng(seed)
    if model_cfg.kind == 'rhn':
        return RhnLanguageModel.create(
            vocab_size,
            model_cfg.embed_dim,
            model_cfg.width,
            model_cfg.depth,
            rng,
            coupled_c=model_cfg.coupled_c,
            tied=model_cfg.tied,
            threads=threads,
        )
    return LstmLanguageModel.create(vocab_size, model_cfg.embed_dim, model_cfg.hidden_sizes, rng, threads=threads)


def prepare_corpus(data_cfg: DataConfig, settings: Mapping[str, Any]) -> CharCorpus:
    text = load_corpus(
        path=data_cfg.path,
        url=data_cfg.url or settings['CORPUS_URL'],
        cache_dir=settings['DATA_DIR'],
        max_bytes=data_cfg.max_bytes,
        bundled=data_cfg.bundled,
    )
    return build_char_corpus(text, data_cfg.valid_fraction)


def run_training(cfg: ExperimentConfig, corpus: CharCorpus, seed: Optional[int] = None):
    """Build a model from ``cfg`` and train it; returns (model, metrics)."""
    train_cfg = cfg.train if seed is None else replace(cfg.train, seed=seed)
    model = build_model(cfg.model, corpus.vocab_size, train_cfg.seed, train_cfg.threads)
    model.metadata['vocab'] = corpus.vocab
    return train_language_model(model, corpus, train_cfg, cfg.reg)


def _summary(label: str, model: LanguageModel, metrics: TrainMetrics) -> Dict[str, Any]:
    report = detect_zero_groups(model.tensors, model.group_map())
    total = sum(layer.total for layer in report.layers)
    zero = sum(report.zero_groups_per_layer)
    return {
        'run': label,
        'valid_ppl': metrics.final.valid_ppl if metrics.final else float('nan'),
        'hidden_sizes': ' '.join(str(layer.surviving) for layer in report.layers),
        'zero_components': zero,
        'removed_fraction': zero / total if total else 0.0,
        'parameters': model.parameter_count(),
    }


def lambda_sweep(
    cfg: ExperimentConfig, corpus: CharCorpus, lambdas: Sequence[float] = LAMBDA_GRID
) -> List[Dict[str, Any]]:
    """Train a λ = 0 baseline and one group Lasso model per λ, all with the same seed and τ.

    Each row reports the fraction of removed components and whether validation
    perplexity stays within ``PPL_TOLERANCE`` of the baseline.
    """
    base_cfg = cfg.with_overrides('reg', mode='group_lasso', lam=0.0)
    baseline_model, baseline_metrics = run_training(base_cfg, corpus)
    baseline = _summary('lambda=0', baseline_model, baseline_metrics)
    baseline.update({'lambda': 0.0, 'within_tolerance': True})
    rows = [baseline]
    for lam in lambdas:
        model, metrics = run_training(cfg.with_overrides('reg', mode='group_lasso', lam=lam), corpus)
        row = _summary(f"lambda={lam:g}", model, metrics)
        row['lambda'] = lam
        row['within_tolerance'] = row['valid_ppl'] <= baseline['valid_ppl'] * (1.0 + PPL_TOLERANCE)
        rows.append(row)
        logger.info(
            "lambda=%g: removed %.1f%% of components, valid ppl %.3f (baseline %.3f)",
            lam,
            100 * row['removed_fraction'],
            row['valid_ppl'],
            baseline['valid_ppl'],
        )
    return rows


def l1_unveiling(cfg: ExperimentConfig, corpus: CharCorpus, seeds: Sequence[int] = L1_SEEDS) -> List[Dict[str, Any]]:
    """Per seed, compare all-zero ISS groups after ℓ1 training and after unregularized training.

    Both runs use the same τ thresholding, so any extra zero groups come from
    the ℓ1 term.
    """
    rows = []
    for seed in seeds:
        plain_model, plain_metrics = run_training(cfg.with_overrides('reg', mode='none'), corpus, seed)
        l1_model, l1_metrics = run_training(cfg.with_overrides('reg', mode='l1'), corpus, seed)
        plain = _summary('none', plain_model, plain_metrics)
        sparse = _summary('l1', l1_model, l1_metrics)
        rows.append(
            {
                'seed': seed,
                'baseline_zero_components': plain['zero_components'],
                'l1_zero_components': sparse['zero_components'],
                'baseline_valid_ppl': plain['valid_ppl'],
                'l1_valid_ppl': sparse['valid_ppl'],
                'l1_more_zero_groups': sparse['zero_components'] > plain['zero_components'],
            }
        )
        logger.info(
            "seed %d: %d zero groups with l1, %d without", seed, sparse['zero_components'], plain['zero_components']
        )
    return rows


def direct_design(cfg: ExperimentConfig, corpus: CharCorpus, lam: float) -> List[Dict[str, Any]]:
    """Learn hidden sizes with group Lasso, then train a dense model of those sizes from scratch."""
    iss_model, iss_metrics = run_training(cfg.with_overrides('reg', mode='group_lasso', lam=lam), corpus)
    learned = _summary(f"iss lambda={lam:g}", iss_model, iss_metrics)
    sizes = [int(s) for s in learned['hidden_sizes'].split()]
    if cfg.model.kind == 'rhn':
        model_cfg = replace(cfg.model, width=sizes[0], embed_dim=sizes[0])
    else:
        model_cfg = replace(cfg.model, hidden_sizes=sizes)
    direct_cfg = replace(cfg.with_overrides('reg', lam=0.0), model=model_cfg)
    direct_model, direct_metrics = run_training(direct_cfg, corpus)
    direct = _summary('direct design', direct_model, direct_metrics)
    logger.info(
        "Learned sizes %s: ISS valid ppl %.3f, direct design valid ppl %.3f",
        sizes,
        learned['valid_ppl'],
        direct['valid_ppl'],
    )
    return [learned, direct]


def run_experiment(kind: str, cfg: ExperimentConfig, corpus: CharCorpus, lam: Optional[float] = None) -> List[Dict]:
    if kind == 'lambda-sweep':
        return lambda_sweep(cfg, corpus)
    if kind == 'l1-unveil':
        return l1_unveiling(cfg, corpus)
    if kind == 'direct-design':
        return direct_design(cfg, corpus, cfg.reg.lam if lam is None else lam)
    raise ValueError(f"Unknown experiment kind: {kind}")
