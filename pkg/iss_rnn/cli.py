"""Command-line interface for the ISS toolkit."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

from requests.exceptions import RequestException

from iss_rnn.bench import default_cases, run_bench
from iss_rnn.compaction import apply_compaction, plan_compaction, random_probes, save_plan, verify_equivalence
from iss_rnn.config import load_experiment_config, load_settings
from iss_rnn.corpus import build_char_corpus, load_corpus
from iss_rnn.errors import DivergenceError, IssRnnError, UsageError
from iss_rnn.experiments import EXPERIMENT_KINDS, build_model, prepare_corpus, run_experiment
from iss_rnn.gradcheck import finite_difference_check, lstm_problem, model_problem, rhn_problem
from iss_rnn.numerics import Rng
from iss_rnn.serialization import load_model, save_model
from iss_rnn.topology import detect_zero_groups, export_group_map
from iss_rnn.training import THRESHOLD_ORDER, calibrate_tau, perplexity, train_language_model
from iss_rnn.utils import append_csv_row, config_fingerprint, write_csv_report

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _args_fingerprint(args: argparse.Namespace) -> str:
    return config_fingerprint({k: v for k, v in vars(args).items() if k != 'handler'})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='iss-rnn', description='Intrinsic Sparse Structure learning for LSTM and RHN models')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--threads', type=int, default=None, help='worker threads for gemm and bench')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument('--config', help='experiment config JSON')
        p.add_argument('--lambda', dest='lam', type=float, help='group Lasso coefficient')
        p.add_argument('--tau', type=float, help='per-step threshold')
        p.add_argument('--epsilon', type=float, help='norm smoothing term')
        p.add_argument('--mode', choices=('group_lasso', 'l1', 'none'))
        p.add_argument('--l1-decay', type=float)
        p.add_argument('--seed', type=int)
        p.add_argument('--epochs', type=int)
        p.add_argument('--learning-rate', type=float)
        p.add_argument('--dropout-keep', type=float)
        p.add_argument('--model-kind', choices=('lstm_stack', 'rhn'))
        p.add_argument('--hidden', type=_ints, help='comma-separated LSTM hidden sizes')
        p.add_argument('--corpus', help='local text file instead of the downloaded corpus')
        p.add_argument('--bundled-corpus', action='store_true', help='use the corpus shipped with the package')

    p = sub.add_parser('train', help='train a model with ISS regularization')
    add_config_flags(p)
    p.add_argument('--init-model', help='fine-tune this model file instead of starting from scratch')
    p.add_argument('--out', default='model.issm')
    p.add_argument('--metrics', default='metrics.csv')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('analyze', help='report zero ISS groups and group-norm histograms')
    p.add_argument('model')
    p.add_argument('--zero-tol', type=float, default=0.0)
    p.add_argument('--bins', type=int, default=20)
    p.add_argument('--out-dir', default='.')
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser('compact', help='remove zero ISS components and check equivalence')
    p.add_argument('model')
    p.add_argument('--zero-tol', type=float, default=None)
    p.add_argument('--out', default='compact.issm')
    p.add_argument('--plan', default='plan.json')
    p.add_argument('--report', default='equivalence.json')
    p.add_argument('--probes', type=int, default=10)
    p.add_argument('--probe-steps', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_compact)

    p = sub.add_parser('bench', help='dense vs CSR vs structured GEMM timings')
    p.add_argument('--full-shapes', action='store_true')
    p.add_argument('--sparsity', type=_floats, default=[0.0, 0.5, 0.8, 0.9])
    p.add_argument('--repetitions', type=int, default=10)
    p.add_argument('--warmup', type=int, default=3)
    p.add_argument('--kernel', choices=('blas', 'blocked'), default='blas')
    p.add_argument('--out', default='bench.csv')
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser('eval', help='print perplexity of a model')
    p.add_argument('model')
    p.add_argument('--config', help='experiment config JSON (data section)')
    p.add_argument('--corpus')
    p.add_argument('--bundled-corpus', action='store_true')
    p.add_argument('--split', choices=('train', 'valid'), default='valid')
    p.add_argument('--batch-size', type=int, default=10)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference gradient check')
    p.add_argument('--kind', choices=('lstm', 'rhn'), default='lstm')
    p.add_argument('--model', help='check a saved model on random tokens instead')
    p.add_argument('--configs', type=int, default=20)
    p.add_argument('--hidden', type=_ints, default=[3])
    p.add_argument('--input-size', type=int, default=4)
    p.add_argument('--width', type=int, default=4)
    p.add_argument('--depth', type=int, default=3)
    p.add_argument('--steps', type=int, default=5)
    p.add_argument('--epsilon', type=float, default=1e-5)
    p.add_argument('--tol', type=float, default=1e-4)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('calibrate-tau', help='largest threshold that keeps perplexity')
    p.add_argument('model')
    p.add_argument('--config', help='experiment config JSON (data section)')
    p.add_argument('--corpus')
    p.add_argument('--bundled-corpus', action='store_true')
    p.add_argument('--grid', type=_floats, default=[0.0, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3])
    p.add_argument('--tolerance', type=float, default=0.001)
    p.set_defaults(handler=cmd_calibrate_tau)

    p = sub.add_parser('export-groups', help='write the ISS group map as JSON')
    p.add_argument('model')
    p.add_argument('--out', default='groups.json')
    p.set_defaults(handler=cmd_export_groups)

    p = sub.add_parser('experiment', help='lambda sweep, l1 unveiling or direct design')
    add_config_flags(p)
    p.add_argument('--kind', choices=EXPERIMENT_KINDS, required=True)
    p.add_argument('--out', default='experiment.csv')
    p.set_defaults(handler=cmd_experiment)
    return parser


def _experiment_config(args: argparse.Namespace, settings: Dict[str, Any]):
    cfg = load_experiment_config(args.config)
    cfg = cfg.with_overrides('model', kind=args.model_kind, hidden_sizes=args.hidden)
    cfg = cfg.with_overrides(
        'reg', lam=args.lam, tau=args.tau, epsilon=args.epsilon, mode=args.mode, l1_decay=args.l1_decay
    )
    cfg = cfg.with_overrides(
        'train',
        seed=args.seed,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        dropout_keep=args.dropout_keep,
        threads=args.threads or settings['THREADS'],
    )
    return cfg.with_overrides('data', path=args.corpus, bundled=args.bundled_corpus or None)


def _model_corpus(model, args: argparse.Namespace, settings: Dict[str, Any]):
    """The corpus encoded with the vocabulary stored in ``model``."""
    cfg = load_experiment_config(getattr(args, 'config', None))
    cfg = cfg.with_overrides('data', path=args.corpus, bundled=args.bundled_corpus or None)
    vocab = model.metadata.get('vocab')
    if vocab is None:
        raise UsageError("model file has no stored vocabulary; it cannot be evaluated on text")
    text = load_corpus(
        path=cfg.data.path,
        url=cfg.data.url or settings['CORPUS_URL'],
        cache_dir=settings['DATA_DIR'],
        max_bytes=cfg.data.max_bytes,
        bundled=cfg.data.bundled,
    )
    return build_char_corpus(text, cfg.data.valid_fraction, vocab=vocab)


def cmd_train(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    cfg = _experiment_config(args, settings)
    print(f"Config fingerprint: {cfg.fingerprint}")
    print("Loading corpus...")
    corpus = prepare_corpus(cfg.data, settings)
    print(f"Corpus: {corpus.train.size} training and {corpus.valid.size} validation characters, "
          f"vocabulary {corpus.vocab_size}")

    if args.init_model:
        model = load_model(args.init_model, cfg.train.threads)
        if model.metadata.get('vocab') not in (None, corpus.vocab):
            raise UsageError(f"vocabulary of {args.init_model} does not match the corpus")
    else:
        model = build_model(cfg.model, corpus.vocab_size, cfg.train.seed, cfg.train.threads)
    model.metadata['vocab'] = corpus.vocab

    if os.path.exists(args.metrics):
        os.remove(args.metrics)
    layer_names = model.group_map().layer_names

    def on_epoch(epoch):
        row = {**epoch.row(layer_names), 'reg_mode': cfg.reg.mode, 'threshold_order': THRESHOLD_ORDER}
        append_csv_row(args.metrics, row, cfg.fingerprint)
        print(f"Epoch {epoch.epoch}: valid perplexity {epoch.valid_ppl:.3f}, zero groups {epoch.zero_groups}")

    try:
        model, metrics = train_language_model(model, corpus, cfg.train, cfg.reg, on_epoch=on_epoch)
    except DivergenceError as e:
        if e.model is not None:
            save_model(e.model, args.out + '.last-good')
            print(f"Saved last good model to {args.out}.last-good", file=sys.stderr)
        raise
    save_model(model, args.out)
    print(f"Saved model to {args.out}")
    print(f"Wrote metrics to {args.metrics}")
    return 0


def cmd_analyze(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    model = load_model(args.model)
    report = detect_zero_groups(model.tensors, model.group_map(), args.zero_tol, args.bins)
    fingerprint = _args_fingerprint(args)
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv_report(os.path.join(args.out_dir, 'sparsity.csv'), report.layer_rows(), fingerprint)
    write_csv_report(os.path.join(args.out_dir, 'histogram.csv'), report.histogram_rows(), fingerprint)
    tensor_rows = [
        {'tensor_id': t.tensor_id, 'before': t.before, 'after': t.after, 'zero_fraction': t.zero_fraction}
        for t in report.tensors
    ]
    write_csv_report(os.path.join(args.out_dir, 'tensors.csv'), tensor_rows, fingerprint)
    for layer in report.layers:
        print(f"{layer.name}: {layer.zero} of {layer.total} components zero, {layer.surviving} remain")
    return 0


def cmd_compact(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    model = load_model(args.model, settings['THREADS'])
    group_map = model.group_map()
    zero_tol = args.zero_tol if args.zero_tol is not None else 0.0
    report = detect_zero_groups(model.tensors, group_map, zero_tol)
    if args.zero_tol is None and sum(report.zero_groups_per_layer) == 0:
        raise UsageError(
            "model has no exactly-zero ISS groups; train with a threshold (tau > 0) first or pass --zero-tol"
        )
    plan = plan_compaction(model.tensors, group_map, report)
    compact = apply_compaction(model, plan)
    probes = random_probes(model.vocab_size, args.probes, args.probe_steps, 1, Rng(args.seed))
    equivalence = verify_equivalence(model, compact, plan, probes, tol=0.0 if args.zero_tol is None else 1e-6)
    save_model(compact, args.out)
    save_plan(plan, args.plan)
    with open(args.report, 'w') as f:
        json.dump(
            {
                'max_hidden_diff': equivalence.max_hidden_diff,
                'max_logit_diff': equivalence.max_logit_diff,
                'max_abs_diff': equivalence.max_abs_diff,
                'tol': equivalence.tol,
                'passed': equivalence.passed,
                'probes': equivalence.probes,
                'parameters_before': model.parameter_count(),
                'parameters_after': compact.parameter_count(),
            },
            f,
            indent=2,
        )
    print(f"Hidden sizes {plan.original_sizes} -> {plan.hidden_sizes}")
    print(f"Parameters {model.parameter_count()} -> {compact.parameter_count()}")
    print(f"Max output difference {equivalence.max_abs_diff:.3g} ({'passed' if equivalence.passed else 'FAILED'})")
    return 0 if equivalence.passed else 1


def cmd_bench(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    cases = default_cases(
        full_shapes=args.full_shapes,
        sparsities=args.sparsity,
        repetitions=args.repetitions,
        warmup=args.warmup,
        threads=args.threads or settings['THREADS'],
        kernel=args.kernel,
    )
    print(f"Running {len(cases)} benchmark cases...")
    report = run_bench(cases)
    write_csv_report(args.out, report.rows(), _args_fingerprint(args))
    for result in report.results:
        print(
            f"{result.case.case_id}: CSR {result.csr_speedup:.2f}x, "
            f"structured (k={result.k}) {result.structured_speedup:.2f}x"
        )
    print(f"Wrote {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    model = load_model(args.model, settings['THREADS'])
    corpus = _model_corpus(model, args, settings)
    data = corpus.valid if args.split == 'valid' else corpus.train
    print(f"Perplexity ({args.split}): {perplexity(model, data, args.batch_size):.6f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    reports = []
    if args.model:
        model = load_model(args.model)
        rng = Rng(args.seed)
        tokens = rng.integers(model.vocab_size, size=(args.steps + 1) * 2).reshape(args.steps + 1, 2)
        params, loss_fn = model_problem(model, tokens[:-1], tokens[1:])
        reports.append(finite_difference_check(params, loss_fn, args.epsilon, args.tol, max_entries=50, rng=rng))
    else:
        for n in range(args.configs):
            if args.kind == 'lstm':
                params, loss_fn = lstm_problem(args.seed + n, args.input_size, args.hidden, args.steps)
            else:
                params, loss_fn = rhn_problem(args.seed + n, args.width, args.depth, args.steps, coupled_c=bool(n % 2))
            reports.append(finite_difference_check(params, loss_fn, args.epsilon, args.tol))
    worst = max(reports, key=lambda r: r.max_rel_error)
    print(f"Checked {sum(r.checked for r in reports)} entries in {len(reports)} configurations")
    print(f"Max relative error {worst.max_rel_error:.3g} at {worst.worst_tensor}{list(worst.worst_index)}")
    if not worst.passed:
        print(f"Error: gradient check failed (tolerance {args.tol})", file=sys.stderr)
        return 1
    return 0


def cmd_calibrate_tau(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    model = load_model(args.model, settings['THREADS'])
    corpus = _model_corpus(model, args, settings)
    result = calibrate_tau(model, corpus.valid, args.grid, args.tolerance)
    for tau, ppl in result.perplexities.items():
        print(f"  tau={tau:g}: perplexity {ppl:.4f}")
    print(f"Baseline perplexity {result.baseline_ppl:.4f}")
    print(f"Chosen tau {result.tau:g}{' (no tau within tolerance)' if result.warning else ''}")
    return 0


def cmd_export_groups(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    model = load_model(args.model)
    group_map = model.group_map()
    export_group_map(group_map, args.out)
    print(f"Wrote {group_map.num_groups} ISS groups in {group_map.N} layers to {args.out}")
    return 0


def cmd_experiment(args: argparse.Namespace, settings: Dict[str, Any]) -> int:
    cfg = _experiment_config(args, settings)
    corpus = prepare_corpus(cfg.data, settings)
    rows = run_experiment(args.kind, cfg, corpus)
    write_csv_report(args.out, rows, cfg.fingerprint)
    for row in rows:
        print('  ' + ', '.join(f"{k}={v}" for k, v in row.items()))
    print(f"Wrote {args.out}")
    return 0


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 2 on usage errors and 1 on any other failure."""
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings()
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"--threads must be at least 1, got {args.threads}")
        logging.basicConfig(
            level=(args.log_level or settings['LOG_LEVEL']).upper(),
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        )
        return args.handler(args, settings)
    except UsageError as e:
        print(f"Usage error: {e}", file=sys.stderr)
        return 2
    except (IssRnnError, RequestException, OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
