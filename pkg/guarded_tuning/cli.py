"""
guarded-tuning command line

    guarded-tuning run --config online.yaml --seed 3 --out runs/online-s3
    guarded-tuning run --arch sl --out runs/sl-s0
    guarded-tuning attack runs/online-s3
    guarded-tuning compare runs/* --csv table.csv
    guarded-tuning gen-data --task parity-of-window --out data/
"""
import argparse
import logging
import os
import sys

import yaml

from guarded_tuning.config import ARCHITECTURES, DEFAULTS, load_config, merge
from guarded_tuning.errors import ConfigError, GuardedTuningError
from guarded_tuning.tasks import TASKS, generate_toy_task, write_task

logger = logging.getLogger('guarded_tuning')

LOG_FORMAT = '$asctime $name:$lineno $message'


def setup_logging(verbose=False):
    level = os.environ.get('GT_LOGLEVEL') or ('DEBUG' if verbose else 'INFO')
    root = logging.getLogger()
    if not root.handlers:
        hdlr = logging.StreamHandler(sys.stdout)
        hdlr.setFormatter(logging.Formatter(LOG_FORMAT, style='$'))
        root.addHandler(hdlr)
    root.setLevel(level.upper())


def overrides_from(args):
    """ dotted config keys for the flags that were given """
    return {
        'seed': getattr(args, 'seed', None),
        'architecture': getattr(args, 'arch', None),
        'task.name': getattr(args, 'task', None),
        'training.steps': getattr(args, 'steps', None),
        'decorrelation.lambda': getattr(args, 'lam', None),
        'quantization.bits': getattr(args, 'bits', None),
        'quantization.percentile': getattr(args, 'percentile', None),
        'quantization.enabled': False if getattr(args, 'no_quant', False) else None,
        'output.directory': getattr(args, 'out', None),
    }


def cmd_run(args):
    from guarded_tuning.experiment import run_experiment

    config = load_config(args.config, overrides_from(args))
    report = run_experiment(config)
    print(yaml.safe_dump({k: v for k, v in report.to_dict().items() if k in ('run_id', 'accuracy',
                                                                            'shared_layer_count')},
                         sort_keys=True), end='')
    for phase, privacy in sorted(report.privacy.items()):
        print(f'{phase} attack F1: {privacy["mean"]}')
    print(f'fine-tune bytes: {report.communication["finetune_bytes"]}')


def cmd_attack(args):
    from guarded_tuning.attack import AttackConfig
    from guarded_tuning.experiment import reattack

    attack = None
    if args.config:
        with open(args.config) as fin:
            raw = yaml.safe_load(fin) or {}
        errors = []
        section = merge(DEFAULTS['attack'], raw.get('attack', {}), errors, prefix='attack.')
        if errors:
            raise ConfigError(errors)
        attack = AttackConfig(**section).validate()
    reports = reattack(args.directory, run_id=args.run_id, attack=attack)
    for phase, report in sorted(reports.items()):
        print(f'{phase} attack F1: {report.mean}' + (f' ({report.reason})' if report.reason else ''))


def cmd_compare(args):
    from guarded_tuning.experiment import emit_comparison, load_reports

    text, table = emit_comparison(load_reports(args.directories))
    print(text, end='')
    if args.csv:
        with open(args.csv, 'w') as fout:
            fout.write(table)
        logger.info('comparison written to %s', args.csv)


def cmd_gen_data(args):
    config = load_config(args.config, overrides_from(args))
    train, evaluation = generate_toy_task(config.task, config.seed, config.model.vocab_size,
                                          config.model.max_seq_len)
    for split, path in write_task(train, evaluation, args.out).items():
        print(f'{split}: {path}')


def parser():
    p = argparse.ArgumentParser(prog='guarded-tuning',
                                description='privacy-preserving split fine-tuning experiments')
    p.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    sub = p.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run one experiment end to end')
    run.add_argument('--config', help='YAML config file')
    run.add_argument('--seed', type=int)
    run.add_argument('--arch', choices=ARCHITECTURES)
    run.add_argument('--task', choices=TASKS)
    run.add_argument('--steps', type=int, help='training steps, 0 for epochs over the training set')
    run.add_argument('--lambda', dest='lam', type=float, help='decorrelation weight')
    run.add_argument('--bits', type=int)
    run.add_argument('--percentile', type=int)
    run.add_argument('--no-quant', action='store_true', help='send raw float32 frames')
    run.add_argument('--out', help='the run directory')
    run.set_defaults(func=cmd_run)

    attack = sub.add_parser('attack', help='re-run the attacks of a finished run')
    attack.add_argument('directory')
    attack.add_argument('--run-id')
    attack.add_argument('--config', help='YAML file whose attack section replaces the run\'s')
    attack.set_defaults(func=cmd_attack)

    compare = sub.add_parser('compare', help='comparison table over run directories')
    compare.add_argument('directories', nargs='+')
    compare.add_argument('--csv', help='also write the table as CSV')
    compare.set_defaults(func=cmd_compare)

    gen = sub.add_parser('gen-data', help='write a task\'s train and eval sets as .npy')
    gen.add_argument('--config')
    gen.add_argument('--seed', type=int)
    gen.add_argument('--task', choices=TASKS)
    gen.add_argument('--out', required=True)
    gen.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        args.func(args)
    except (GuardedTuningError, FileNotFoundError) as e:
        logger.error('%s', e)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
