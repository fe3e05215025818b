"""
experiment runs: one architecture, one task, one seed, end to end

run_experiment goes through the phases

    zero-shot  build the pre-trained partition, score it untuned
    fine-tune  transfer the adapters, train under the architecture
    evaluate   split inference over the eval set (and the emulator path)
    attack     reconstruct client tokens from the recorded transcript
    account    bytes by phase, direction and kind, shared layers
    persist    config.yaml, report.yaml, manifest.yaml, transcript.bin and the run store

Any error inside a phase is raised as PhaseError naming the phase. A run is a
pure function of its config: repeating it gives the same report apart from
wall_time, and the same transcript bytes.
"""
import contextlib
import csv
import dataclasses
import io
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from guarded_tuning.attack import FINETUNE, NOT_APPLICABLE, AttackReport, evaluate_attack
from guarded_tuning.checkpoint import encode_checkpoint
from guarded_tuning.config import resolve
from guarded_tuning.errors import ConfigError, PhaseError
from guarded_tuning.model import build_emulator, build_model
from guarded_tuning.protocol import (ClientEndpoint, ServerEndpoint, Transcript, account, emulator_inference,
                                     finetune, open_session, setup, split_inference)
from guarded_tuning.protocol.endpoints import pack_segments
from guarded_tuning.protocol.messages import INFERENCE
from guarded_tuning.tasks import ToyDataset, batch_schedule, exact_match_accuracy, generate_toy_task, train_step_count
from guarded_tuning.util import connect, plain

logger = logging.getLogger(__name__)

CONFIG_FILE, REPORT_FILE, MANIFEST_FILE = 'config.yaml', 'report.yaml', 'manifest.yaml'
TRANSCRIPT_FILE = 'transcript.bin'
TRANSCRIPT, CLIENT_CHECKPOINT, SERVER_CHECKPOINT, REFERENCES = ('transcript', 'checkpoint/client',
                                                                 'checkpoint/server', 'references')
BASELINE = 'sl'
ZERO_SHOT = 'zero-shot'


@dataclass
class RunReport:
    """ everything a run reports, written as report.yaml """
    run_id: str
    architecture: str
    task: str
    seed: int
    config_hash: str
    accuracy: dict = field(default_factory=dict)
    privacy: dict = field(default_factory=dict)
    communication: dict = field(default_factory=dict)
    shared_layer_count: int = 0
    training: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, wall_time=True):
        data = {
            'run_id': self.run_id,
            'architecture': self.architecture,
            'task': self.task,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'accuracy': self.accuracy,
            'privacy': self.privacy,
            'communication': self.communication,
            'shared_layer_count': self.shared_layer_count,
            'training': self.training,
            'config': self.config,
        }
        if wall_time:
            data['wall_time'] = self.wall_time
        return plain(data)

    def to_yaml(self, wall_time=True):
        return yaml.safe_dump(self.to_dict(wall_time=wall_time), sort_keys=True, default_flow_style=False)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fin:
            return cls.from_dict(yaml.safe_load(fin))

    def privacy_mean(self, phase):
        return self.privacy.get(phase, {}).get('mean', NOT_APPLICABLE)


def run_id_for(config):
    return f'{config.architecture}-{config.task.name}-s{config.seed}-{config.config_hash()[:10]}'


@contextlib.contextmanager
def phase(name):
    logger.debug('phase %s', name)
    try:
        yield
    except PhaseError:
        raise
    except Exception as e:
        raise PhaseError(name, e) from e


def batched_accuracy(forward, dataset, batch_size):
    """ exact-match accuracy over all eval batches, weighted by batch size """
    hits = 0.0
    for rows in dataset.eval_batches(batch_size):
        ids, targets = dataset.batch(rows)
        hits += exact_match_accuracy(forward(ids), targets) * len(rows)
    return hits / len(dataset)


def pack_references(train, evaluation, schedule):
    buffer = io.BytesIO()
    np.savez(buffer, train=train.tokens, eval=evaluation.tokens,
             schedule=np.asarray(schedule, dtype=np.int64).reshape(len(schedule), -1))
    return buffer.getvalue()


def unpack_references(data, name):
    arrays = np.load(io.BytesIO(data))
    return ToyDataset(name, arrays['train']), ToyDataset(name, arrays['eval']), list(arrays['schedule'])


def attack_references(train, evaluation, schedule, batch_size):
    """ the true input tokens of every training step and every inference batch """
    train_refs = [train.inputs[rows] for rows in schedule]
    eval_refs = [evaluation.inputs[rows] for rows in evaluation.eval_batches(batch_size)]
    return train_refs, eval_refs


def run_attacks(config, transcript, train, evaluation, schedule):
    """ AttackReports by phase, NOT_APPLICABLE for both when no stage is enabled """
    if not config.attack.stages:
        return {p: AttackReport.not_applicable(p, 'attack disabled') for p in (FINETUNE, INFERENCE)}
    train_refs, eval_refs = attack_references(train, evaluation, schedule, config.training.batch_size)
    return evaluate_attack(transcript, config.attack, config.model, train_refs, eval_refs, config.task.name,
                           exclude=(train, evaluation))


def run_experiment(config, directory=None, store=None):
    """ run all phases for one config

    Args:
        config (ExperimentConfig): a validated config
        directory (str): the run directory, defaults to config.output_directory
        store (RunStore): defaults to the store of the run directory

    Returns:
        RunReport
    """
    started = time.perf_counter()
    directory = directory or config.output_directory
    run_id = run_id_for(config)
    arch = config.arch
    logger.info('run %s: %s on %s, seed %d', run_id, arch.value, config.task.name, config.seed)

    with phase('zero-shot'):
        config.validate()
        model = config.model
        train, evaluation = generate_toy_task(config.task, config.seed, model.vocab_size, model.max_seq_len)
        partition = build_model(model, config.seed)
        if arch.ships_emulator:
            partition.emulator = build_emulator(partition.backbone, config.emulator_size)
        zero_shot = batched_accuracy(partition.forward, evaluation, config.training.batch_size)
        logger.info('zero-shot accuracy %.4f', zero_shot)

    with phase('fine-tune'):
        flags, codec = config.flags(), config.quantization.codec()
        session = open_session(arch)
        client = ClientEndpoint(arch, flags, codec, config.optimizer)
        server = ServerEndpoint(partition, arch, flags, codec, config.optimizer)
        setup(client, server, session)
        n_steps = train_step_count(len(train), config.training.batch_size, config.training.steps,
                                   config.training.epochs)
        schedule = batch_schedule(len(train), config.training.batch_size, n_steps, config.seed)
        records = finetune(client, server, session, [train.batch(rows) for rows in schedule])
        logger.info('fine-tuned %d steps, final loss %.4f', len(records), records[-1].loss if records else 0.0)

    with phase('evaluate'):
        finetuned = batched_accuracy(lambda ids: split_inference(client, server, session, ids)[0],
                                     evaluation, config.training.batch_size)
        accuracy = {'zero_shot': zero_shot, 'finetuned': finetuned}
        if arch.ships_emulator:
            accuracy['emulator'] = batched_accuracy(lambda ids: emulator_inference(client, ids),
                                                    evaluation, config.training.batch_size)
        session.close()
        logger.info('accuracy %s', accuracy)

    with phase('attack'):
        attacks = run_attacks(config, session.transcript, train, evaluation, schedule)
        logger.info('attack F1 fine-tune %s, inference %s', attacks[FINETUNE].mean, attacks[INFERENCE].mean)

    with phase('account'):
        comm = account(session.transcript)
        logger.info('%d bytes in %d messages, %d shared layers', comm.total_bytes, comm.message_count,
                    comm.shared_layer_count)

    report = RunReport(
        run_id=run_id,
        architecture=arch.value,
        task=config.task.name,
        seed=config.seed,
        config_hash=config.config_hash(),
        accuracy=accuracy,
        privacy={p: r.to_dict() for p, r in attacks.items()},
        communication=comm.to_dict(),
        shared_layer_count=comm.shared_layer_count,
        training={
            'steps': len(records),
            'final_loss': records[-1].loss if records else None,
            'mean_dcor': float(np.mean([r.dcor for r in records])) if records else None,
            'losses': [r.loss for r in records],
        },
        config=config.to_dict(),
    )

    with phase('persist'):
        report.wall_time = round(time.perf_counter() - started, 3)
        os.makedirs(directory, exist_ok=True)
        store = store or connect(directory=directory)
        artifacts = store.artifacts
        artifacts.put(f'{run_id}/{TRANSCRIPT}', session.transcript.to_bytes())
        artifacts.put(f'{run_id}/{CLIENT_CHECKPOINT}', pack_segments([client.input_adapter, client.output_adapter]))
        artifacts.put(f'{run_id}/{SERVER_CHECKPOINT}', encode_checkpoint(server.backbone.params))
        artifacts.put(f'{run_id}/{REFERENCES}', pack_references(train, evaluation, schedule))
        for attack in attacks.values():
            store.save_attack(run_id, attack)
        store.save_run(run_id, config, report.to_dict())
        write_yaml(os.path.join(directory, CONFIG_FILE), config.to_dict())
        write_yaml(os.path.join(directory, MANIFEST_FILE), partition.manifest())
        write_yaml(os.path.join(directory, REPORT_FILE), report.to_dict())
        session.transcript.write(os.path.join(directory, TRANSCRIPT_FILE))
        logger.info('run %s written to %s in %.1fs', run_id, directory, report.wall_time)
    return report


def write_yaml(path, data):
    with open(path, 'w') as fout:
        yaml.safe_dump(plain(data), fout, sort_keys=True, default_flow_style=False)


def load_run(directory, run_id=None, store=None):
    """ (config, report, store) of a finished run, read from its directory's store """
    if store is None and not os.path.isdir(directory):
        raise ConfigError(f'{directory}: not a run directory')
    store = store or connect(directory=directory)
    record = store.get_run(run_id)
    config = resolve(record.config)
    return config, RunReport.from_dict(record.report), store


def reattack(directory, run_id=None, attack=None, store=None):
    """ re-run the attacks of a finished run from its store, without re-training

    Args:
        directory (str): the run directory
        run_id (str): the run, defaults to the only run in the store
        attack (AttackConfig): replaces the run's attack config if given

    Returns:
        dict phase => AttackReport
    """
    config, report, store = load_run(directory, run_id, store)
    if attack is not None:
        config = dataclasses.replace(config, attack=attack).validate()
    with phase('attack'):
        transcript = Transcript.from_bytes(store.artifacts.get(f'{report.run_id}/{TRANSCRIPT}'))
        train, evaluation, schedule = unpack_references(store.artifacts.get(f'{report.run_id}/{REFERENCES}'),
                                                        config.task.name)
        attacks = run_attacks(config, transcript, train, evaluation, schedule)
    with phase('persist'):
        for result in attacks.values():
            store.save_attack(report.run_id, result)
    return attacks


# comparison tables
METRICS = ('accuracy', 'finetune_privacy', 'inference_privacy', 'finetune_bytes', 'total_bytes',
           'shared_layers')
DELTA_METRICS = ('accuracy', 'finetune_privacy', 'inference_privacy', 'finetune_bytes')


def _metric(report, metric):
    if metric == 'accuracy':
        return report.accuracy['finetuned']
    if metric == 'zero_shot':
        return report.accuracy['zero_shot']
    if metric == 'finetune_privacy':
        return report.privacy_mean(FINETUNE)
    if metric == 'inference_privacy':
        return report.privacy_mean(INFERENCE)
    if metric == 'finetune_bytes':
        return report.communication['finetune_bytes']
    if metric == 'total_bytes':
        return report.communication['total_bytes']
    if metric == 'shared_layers':
        return report.shared_layer_count
    raise KeyError(metric)


def _mean(values):
    values = [v for v in values if v != NOT_APPLICABLE]
    return float(np.mean(values)) if values else NOT_APPLICABLE


COUNT_METRICS = ('finetune_bytes', 'total_bytes', 'shared_layers')


def _cell(metric, value):
    if value == NOT_APPLICABLE:
        return NOT_APPLICABLE
    return f'{value:.0f}' if metric in COUNT_METRICS else f'{value:.4f}'


def comparison_rows(reports):
    """ (group, metric, {task: value}) rows, values are means over seeds

    Raises:
        ConfigError: the reports were produced with different model configs
    """
    if not reports:
        raise ConfigError('nothing to compare, need at least one report')
    models = {yaml.safe_dump(r.config.get('model'), sort_keys=True) for r in reports}
    if len(models) > 1:
        raise ConfigError('cannot compare runs of different model configs')
    tasks = sorted({r.task for r in reports})
    archs = sorted({r.architecture for r in reports}, key=lambda a: (a != BASELINE, a))
    cells = {}
    for r in reports:
        cells.setdefault((r.architecture, r.task), []).append(r)
    rows = [(ZERO_SHOT, 'accuracy', {t: _mean([_metric(r, 'zero_shot') for r in reports if r.task == t])
                                     for t in tasks})]
    for arch in archs:
        for metric in METRICS:
            rows.append((arch, metric, {t: _mean([_metric(r, metric) for r in cells.get((arch, t), [])])
                                        for t in tasks}))
    means = {(group, metric): values for group, metric, values in rows}
    if BASELINE in archs:
        for arch in archs:
            if arch == BASELINE:
                continue
            for metric in DELTA_METRICS:
                base, own = means[(BASELINE, metric)], means[(arch, metric)]
                rows.append((f'{arch} - {BASELINE}', metric, {
                    t: NOT_APPLICABLE if NOT_APPLICABLE in (base[t], own[t]) else own[t] - base[t]
                    for t in tasks}))
    return tasks, rows


def emit_comparison(reports):
    """ the comparison table as aligned text and as CSV

    One row group per architecture with a column per task, a zero-shot
    group, and, when the sl baseline is present, delta groups against it.

    Returns:
        (text, csv_text)
    """
    tasks, rows = comparison_rows(reports)
    header = ['group', 'metric'] + tasks
    table = [[group, metric] + [_cell(metric, values[t]) for t in tasks] for group, metric, values in rows]
    widths = [max(len(str(row[i])) for row in [header] + table) for i in range(len(header))]
    lines = ['  '.join(str(v).ljust(w) for v, w in zip(header, widths)).rstrip()]
    lines.append('  '.join('-' * w for w in widths))
    previous = None
    for row in table:
        group = row[0] if row[0] != previous else ''
        previous = row[0]
        lines.append('  '.join(str(v).ljust(w) for v, w in zip([group] + row[1:], widths)).rstrip())
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(header)
    for group, metric, values in rows:
        writer.writerow([group, metric] + [values[t] if values[t] == NOT_APPLICABLE else repr(float(values[t]))
                                           for t in tasks])
    return '\n'.join(lines) + '\n', out.getvalue()


def load_reports(directories):
    """ RunReports from run directories, every run in each directory's store """
    reports = []
    for directory in directories:
        if not os.path.isdir(directory):
            raise ConfigError(f'{directory}: not a run directory')
        store = connect(directory=directory)
        reports.extend(RunReport.from_dict(r.report) for r in store.runs.objects.all())
    return reports
