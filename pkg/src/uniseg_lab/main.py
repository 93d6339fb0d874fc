import argparse
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import __version__, cli, conflict, experiment, gradcheck, relations, synth, trainer, utils
from .errors import ConfigError, UnisegError
from .evaluate import evaluate_dataset, result_to_doc
from .labelspace import unify, write_remap_csv
from .model import load_checkpoint
from .schemas import config_schema
from .uniseg_types import (DataBundle, ExperimentConfig, HeadKind, LossKind, MultiLabelTable, RunRecord,
                           SimilarityTensor, TauRule, UnifiedLabelSpace)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

DEFAULT_OUT = {'gen': 'data', 'train': 'runs/train', 'relations': 'runs/relations',
               'experiment': 'runs/experiment', 'gradcheck': 'runs/gradcheck', 'conflict-demo': 'runs/conflict'}


def out_dir_of(args: argparse.Namespace) -> Path:
    return Path(args.out if args.out is not None else DEFAULT_OUT[args.command])


def require_config(args: argparse.Namespace) -> Path:
    if args.config is None:
        raise ConfigError(f'Error! The {args.command} command requires --config')
    return Path(args.config)


def cmd_gen(args: argparse.Namespace) -> int:
    """Writes a dataset dump (manifest.json + one directory per dataset) and the remap table."""
    out = out_dir_of(args)
    if args.config is not None:
        spec, taxonomies, doc = synth.load_spec(Path(args.config), args.seed)
    else:
        spec, taxonomies = synth.FIXTURES[args.fixture](args.seed or 0)
        doc = {}
    bundle = synth.generate_bundle(spec, taxonomies, doc.get('n_train_images', 16), doc.get('n_test_images', 4),
                                   doc.get('height', 32), doc.get('width', 32))
    manifest = synth.dump_datasets(bundle, out)
    write_remap_csv(unify(taxonomies), out / 'remap.csv')
    print(f'Wrote {len(taxonomies)} datasets to {out} ({manifest.name})')
    return EXIT_OK


def evaluate_all(record: RunRecord, space: UnifiedLabelSpace, bundle: DataBundle) -> Dict:
    return {tax.dataset_id: result_to_doc(evaluate_dataset(record.model, bundle.test[tax.dataset_id], space, tax))
            for tax in bundle.taxonomies}


def write_relation_artifacts(out: Path, sim: SimilarityTensor, tau: Optional[float], table: MultiLabelTable,
                             space: UnifiedLabelSpace, rule: TauRule) -> None:
    relations.write_similarity_csv(sim, space, out / 'similarity.csv')
    relations.write_multilabel_csv(table, space, out / 'multilabels.csv')
    relations.write_tau_csv(relations.tau_contributions(sim, space, rule), tau, space, out / 'tau.csv')
    relations.write_relation_graph(relations.relation_graph(table, space), out / 'relations.gv')


def cmd_train(args: argparse.Namespace) -> int:
    """Trains from --config and writes checkpoint.json, metrics.json and loss_curve.csv.\n
    CR_BCE runs the whole two-stage pipeline and also writes the stage 1 run and the relation artifacts."""
    out = out_dir_of(args)
    doc = utils.load_document(require_config(args), config_schema.train_config_schema())
    if args.seed is not None:
        doc['seed'] = args.seed
    bundle = synth.load_data(args.data or doc.get('data', 'fixture:default'), doc.get('n_train_images', 16),
                             doc.get('n_test_images', 4), doc.get('height', 32), doc.get('width', 32), seed=args.seed)
    bundle = synth.select(bundle, doc.get('datasets'))
    space = unify(bundle.taxonomies)
    config = trainer.build_train_config(doc)
    write_remap_csv(space, out / 'remap.csv')

    if config.loss_kind == LossKind.CR_BCE:
        pipeline = trainer.run_cr_pipeline(bundle.train, space, config)
        trainer.write_run(out, pipeline.stage1, space, bundle.taxonomies,
                          evaluate_all(pipeline.stage1, space, bundle), prefix='stage1_')
        write_relation_artifacts(out, pipeline.similarity, pipeline.tau, pipeline.table, space, config.tau_rule)
        record = pipeline.stage2
        print(f"tau = {'NONE' if pipeline.tau is None else pipeline.tau}")
    else:
        record = trainer.train(bundle.train, space, config)
    trainer.write_run(out, record, space, bundle.taxonomies, evaluate_all(record, space, bundle))
    print(f'Finished training ({config.loss_kind.value}, {config.head_kind.value}); '
          f'final loss {record.losses[-1]:.6f}. Results in {out}')
    return EXIT_OK


def cmd_relations(args: argparse.Namespace) -> int:
    """Similarities, tau (with provenance) and the multi-label table from a cosine checkpoint."""
    out = out_dir_of(args)
    model, taxonomies = load_checkpoint(Path(args.checkpoint))
    if not taxonomies:
        raise ConfigError(f'Error! {args.checkpoint} does not record its training taxonomies')
    bundle = synth.select(synth.load_data(args.data, seed=args.seed), [t.dataset_id for t in taxonomies])
    for tax in taxonomies:
        if bundle.taxonomy(tax.dataset_id).classes != tax.classes:
            raise ConfigError(f'Error! The classes of {tax.dataset_id} in {args.data} differ from the checkpoint')
    space = unify(taxonomies)
    sim = relations.compute_similarity(model, bundle.train, space, args.pooled)
    rule = TauRule(args.tau_rule)
    tau = relations.auto_tau(sim, space, rule)
    table = relations.generate_multilabels(sim, tau, space)
    write_relation_artifacts(out, sim, tau, table, space, rule)

    if tau is None:
        print('tau = NONE (no class has its strongest similarity outside its own dataset); table is self-only')
    else:
        contributions = relations.tau_contributions(sim, space, rule)
        print(f'tau = {tau:.6f} ({rule.value}), the mean of {len(contributions)} contributions:')
        for t in contributions:
            print(f'  {t.dataset_id}/{space.classes[t.class_index]} -> '
                  f'{space.classes[t.other_index]}: {t.score:.6f}')
    rows = relations.multilabel_rows(table, space)
    print(f'{len(rows)} multi-label relations:')
    for dataset_id, primary, secondary in rows:
        print(f'  {dataset_id}: {primary} -> {secondary}')
    asym = relations.asymmetric_pairs(relations.relation_graph(table, space))
    if asym:
        print(f"asymmetric: {', '.join(f'{u}->{v}' for u, v in asym)}")
    return EXIT_OK


def data_bundle(config: ExperimentConfig, seed: Optional[int]) -> Optional[DataBundle]:
    """The fixture data regenerated with --seed, or None to let the experiment load config.data itself."""
    if seed is None:
        return None
    return synth.load_data(config.data, config.n_train_images, config.n_test_images, config.height, config.width,
                           seed=seed)


def cmd_experiment(args: argparse.Namespace) -> int:
    """Leave-one-out experiment; writes results.csv, summary.csv, overrides.csv and relations.csv."""
    out = out_dir_of(args)
    config = experiment.load_experiment_config(require_config(args), str(out))
    if args.seed is not None:
        config = config._replace(seeds=(args.seed,))
    threads = utils.resolve_threads(args.threads)
    tables = experiment.run_experiment(config, threads, data_bundle(config, args.seed))
    paths = experiment.write_experiment(tables, out)
    print(f"Finished {len(tables['results'])} result rows; wrote {', '.join(p.name for p in paths)} to {out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Prints one PASS / FAIL line per (loss, head); exits 1 if any fails."""
    out = out_dir_of(args)
    losses = [LossKind(args.loss)] if args.loss else None
    heads = [HeadKind(args.head)] if args.head else None
    reports = gradcheck.run_all(args.seed or 0, args.corrupt, losses, heads)
    rows: List[List] = []
    for report in reports:
        print(gradcheck.format_report(report))
        for block, err in report.block_errors.items():
            rows.append([report.loss_kind.value, report.head_kind.value, block, err, report.passed])
    utils.write_csv(out / 'gradcheck.csv', ['loss', 'head', 'block', 'max_rel_err', 'passed'], rows)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_conflict_demo(args: argparse.Namespace) -> int:
    out = out_dir_of(args)
    seed = args.seed or 0
    for row in conflict.conflict_rows(seed):
        print(f'{row.loss:8s} {row.channel}: grad_1={row.grad_1:+.6f} grad_2={row.grad_2:+.6f} '
              f'conflict={row.conflict}')
    paths = conflict.write_conflict_demo(out, seed)
    print(f"Wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    'gen': cmd_gen,
    'train': cmd_train,
    'relations': cmd_relations,
    'experiment': cmd_experiment,
    'gradcheck': cmd_gradcheck,
    'conflict-demo': cmd_conflict_demo,
}


def run(args: argparse.Namespace) -> int:
    """Runs one command and maps failures onto exit codes.\n
    0 success, 1 validation failure or runtime error, 2 usage / config / I/O error.
    Unexpected exceptions are written to error_<command>.txt in the output directory.

    Args:
        args (argparse.Namespace): The parsed command line

    Returns:
        int: The exit code
    """
    out = out_dir_of(args)
    try:
        utils.setup_logging(out, args.verbose)
        logger.info('uniseg_lab %s: %s %s', __version__, args.command, vars(args))
        start = time.perf_counter()
        code = COMMANDS[args.command](args)
        logger.info('%s finished with exit code %d in %.2f s', args.command, code, time.perf_counter() - start)
        return code
    except ConfigError as ex:
        print(ex)
        return EXIT_USAGE
    except OSError as ex:
        print(f'Error! {ex}')
        return EXIT_USAGE
    except UnisegError as ex:
        print(ex)
        return EXIT_FAILED
    except Exception as ex:  # pylint: disable=broad-except
        logger.error('%s failed with %s', args.command, type(ex).__name__)
        error_file = out / f"error_{args.command.replace('-', '_')}.txt"
        with open(error_file, mode='w', encoding='utf-8') as f:
            f.write(traceback.format_exc())
        print(f'Error! {args.command} failed with {type(ex).__name__}: {ex}')
        print(f'See {error_file} for details.')
        return EXIT_FAILED


def main() -> None:
    """See docs/userguide.md"""
    args = cli.parser.parse_args()
    sys.exit(run(args))


if __name__ == '__main__':
    main()
