import argparse

from .uniseg_types import HeadKind, LossKind, TauRule

# Global flags are accepted after the subcommand, e.g. `uniseg_lab train --config c.yml --seed 3`
common = argparse.ArgumentParser(add_help=False)
common.add_argument('--seed', type=int, required=False, default=None,
                    help='Overrides the seed of the config / spec file. Fixture data (fixture:<name>) is '
                         'generated with it too; without --seed, fixtures use seed 0.')
common.add_argument('--out', type=str, required=False, default=None,
                    help='The output directory. Each command has its own default.')
common.add_argument('--threads', type=int, required=False, default=None,
                    help='Worker threads for independent experiment cells. Falls back to $UNISEG_LAB_THREADS, then 1.')
common.add_argument('--config', type=str, required=False, default=None,
                    help='The YAML or JSON config file of the command (spec file for gen).')
common.add_argument('--verbose', default=False, action='store_true',
                    help='Also print INFO log records to the console. (They always go to uniseg_lab.log)')

parser = argparse.ArgumentParser(prog='uniseg_lab',
                                 description='Multi-dataset segmentation under label shift, at desk scale.')
subparsers = parser.add_subparsers(dest='command', required=True)

parser_gen = subparsers.add_parser('gen', parents=[common],
                                   help='Generate a synthetic dataset dump.')
parser_gen.add_argument('--fixture', type=str, required=False, default='default', choices=['default', 'benchmark'],
                        help='The built-in fixture to dump when --config is not given.')

parser_train = subparsers.add_parser('train', parents=[common],
                                     help='Train one model (or the two-stage CR_BCE pipeline).')
parser_train.add_argument('--data', type=str, required=False, default=None,
                          help="'fixture:<name>' or a dump directory. Overrides the config's data field.")

parser_relations = subparsers.add_parser('relations', parents=[common],
                                         help='Similarities, tau and the multi-label table of a cosine checkpoint.')
parser_relations.add_argument('--checkpoint', type=str, required=True,
                              help='A stage 1 (cosine head) checkpoint.')
parser_relations.add_argument('--data', type=str, required=False, default='fixture:default',
                              help="'fixture:<name>' or a dump directory; the training split is used.")
parser_relations.add_argument('--pooled', default=False, action='store_true',
                              help='Pool similarities over datasets instead of keeping them dataset-specific.')
parser_relations.add_argument('--tau-rule', type=str, required=False, default=TauRule.ARGMAX.value,
                              choices=[r.value for r in TauRule],
                              help='Which (dataset, class) pairs tau is averaged over.')

parser_experiment = subparsers.add_parser('experiment', parents=[common],
                                          help='Run a leave-one-out experiment from --config.')

parser_gradcheck = subparsers.add_parser('gradcheck', parents=[common],
                                         help='Check analytic gradients against finite differences.')
parser_gradcheck.add_argument('--loss', type=str, required=False, default=None,
                              choices=[k.value for k in LossKind], help='Check one loss only.')
parser_gradcheck.add_argument('--head', type=str, required=False, default=None,
                              choices=[k.value for k in HeadKind], help='Check one head only.')
parser_gradcheck.add_argument('--corrupt', default=False, action='store_true',
                              help='Perturb the analytic gradient (negative control; must FAIL).')

parser_conflict = subparsers.add_parser('conflict-demo', parents=[common],
                                        help='Write per-loss gradient sign products for conflicting labels.')
