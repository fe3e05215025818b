"""
the fine-tuning architectures as message sequences between the endpoints

========  =========================================================  ===========================
name      per training step                                          client trains
========  =========================================================  ===========================
sl        activation, activation, loss, gradient, gradient           adapters (no defenses)
online    same as sl, quantized frames and decorrelation loss        adapters
gradfree  activation, activation                                     output adapter only
offline   none, the client trains over a shipped emulator            adapters, emulator frozen
offsite   none, then the client uploads its adapters                 adapters, emulator frozen
========  =========================================================  ===========================

Every architecture starts with one MODEL_TRANSFER from the server (the
transfer phase) and serves inference as input adapter -> server backbone ->
output adapter, except offsite, where the server runs the whole model on the
raw token ids.
"""
import logging
from collections import OrderedDict, deque
from dataclasses import dataclass

import numpy as np

from guarded_tuning import tensor as T
from guarded_tuning.codec import encode_raw
from guarded_tuning.decorrelation import composite_loss
from guarded_tuning.errors import ContractError, ProtocolError
from guarded_tuning.model import embed_only, stack_forward
from guarded_tuning.protocol.endpoints import Architecture, loss_payload
from guarded_tuning.protocol.messages import (CLIENT, INFERENCE, SERVER, TRAIN, TRANSFER, MessageKind,
                                              QueueTransport, Session)
from guarded_tuning.tensor import Tape

logger = logging.getLogger(__name__)

ACTIVATION = MessageKind.ACTIVATION_FRAME
GRADIENT = MessageKind.GRADIENT_FRAME


@dataclass
class StepRecord:
    step: int
    loss: float
    task_loss: float
    dcor: float
    messages: int = 0
    bytes: int = 0


def open_session(architecture, session_id=1, transport=None):
    """ a session that polices the messages the architecture must never send """
    architecture = Architecture(architecture)
    forbidden = set()
    if not architecture.exchanges_gradients:
        forbidden.update({MessageKind.GRADIENT_FRAME, MessageKind.LOSS_REPORT})
    return Session(session_id, transport=transport if transport is not None else QueueTransport(),
                   forbidden=forbidden)


def _to_server(session, client, server, kind, payload):
    client.count_sent(session.send(CLIENT, kind, payload))
    message = server.count_received(session.receive(SERVER, expect=kind))
    for reply_kind, reply in server.handle(message):
        server.count_sent(session.send(SERVER, reply_kind, reply))


def _from_server(session, client, kind):
    return client.count_received(session.receive(CLIENT, expect=kind)).payload


def _since(session, start):
    messages = session.transcript.messages[start:]
    return len(messages), sum(m.payload_byte_len for m in messages)


def setup(client, server, session):
    """ the transfer phase: the server ships adapters (and the emulator) once """
    with session.phase(TRANSFER):
        server.count_sent(session.send(SERVER, MessageKind.MODEL_TRANSFER, server.transfer_payload()))
        payload = _from_server(session, client, MessageKind.MODEL_TRANSFER)
    client.install(payload, server.config)
    logger.debug('transfer: %d bytes to the client', len(payload))


def online_train_step(client, server, session, batch, step=0):
    """ one split training step with activations and gradients at both cut points

    The client computes the loss, including the decorrelation term, at its
    output adapter. Gradient frames carry the loss gradient with respect to
    the activation that crossed the cut in the other direction.
    """
    ids, targets = batch
    start = len(session.transcript)
    with session.phase(TRAIN):
        tape_in = Tape()
        with tape_in:
            emb = embed_only(client.input_adapter, ids)
            theta = client.input_adapter.forward_embeddings(emb)
        _to_server(session, client, server, ACTIVATION, client.codec.encode(theta, tensor_id=1))
        b = client.decode_tensor(_from_server(session, client, ACTIVATION), requires_grad=True)
        tape_out = Tape()
        with tape_out:
            logits = client.output_adapter(b)
            loss, task, dcor = composite_loss(logits, targets, emb, theta, client.flags.decorrelation, parts=True)
        tape_out.backward([(loss, np.ones_like(loss.data))])
        _to_server(session, client, server, MessageKind.LOSS_REPORT, loss_payload(loss.item()))
        _to_server(session, client, server, GRADIENT, client.codec.encode(b.grad, tensor_id=2))
        grad_theta = client.codec.decode(_from_server(session, client, GRADIENT), dtype=client.dtype)
    seeds = [(theta, grad_theta if theta.grad is None else theta.grad + grad_theta)]
    if emb.grad is not None:
        seeds.append((emb, emb.grad))
    tape_in.backward(seeds)
    client.optimizer.step()
    client.optimizer.zero_grad()
    client.losses.append(loss.item())
    return StepRecord(step, loss.item(), task.item(), dcor.item(), *_since(session, start))


def gradfree_train_step(client, server, session, batch, step=0):
    """ one step tuning the output adapter only: two forward messages, no gradients """
    ids, targets = batch
    start = len(session.transcript)
    with session.phase(TRAIN):
        theta = client.input_adapter(ids)
        _to_server(session, client, server, ACTIVATION, client.codec.encode(theta, tensor_id=1))
        b = client.decode_tensor(_from_server(session, client, ACTIVATION))
    with Tape():
        logits = client.output_adapter(b)
        loss = T.cross_entropy_loss(logits, targets)
    T.backward(loss)
    client.optimizer.step()
    client.optimizer.zero_grad()
    client.losses.append(loss.item())
    return StepRecord(step, loss.item(), loss.item(), 0.0, *_since(session, start))


def local_train_step(client, batch, step=0):
    """ one step entirely on the client: adapters over the frozen emulator """
    ids, targets = batch
    if client.emulator is None:
        raise ContractError('local training needs an emulator')
    with Tape():
        emb = embed_only(client.input_adapter, ids)
        theta = client.input_adapter.forward_embeddings(emb)
        logits = client.output_adapter(client.emulator(theta))
        loss, task, dcor = composite_loss(logits, targets, emb, theta, client.flags.decorrelation, parts=True)
    T.backward(loss)
    client.optimizer.step()
    client.optimizer.zero_grad()
    client.losses.append(loss.item())
    return StepRecord(step, loss.item(), task.item(), dcor.item())


def offline_finetune(client, server, session, batches):
    """ fine-tune on the client only; the session refuses any message meanwhile

    Returns:
        list of StepRecord
    """
    records = []
    with session.phase(TRAIN), session.lock():
        for step, batch in enumerate(batches):
            records.append(local_train_step(client, batch, step))
    if client.architecture == Architecture.OFFSITE:
        with session.phase(TRANSFER):
            _to_server(session, client, server, MessageKind.MODEL_TRANSFER, client.upload_payload())
    return records


def finetune(client, server, session, batches):
    """ run the training phase of the client's architecture over batches """
    architecture = client.architecture
    if architecture.trains_locally:
        return offline_finetune(client, server, session, batches)
    step_fn = online_train_step if architecture.exchanges_gradients else gradfree_train_step
    records = []
    for step, batch in enumerate(batches):
        record = step_fn(client, server, session, batch, step)
        records.append(record)
        logger.debug('step %d loss %.4f dcor %.4f %d bytes', step, record.loss, record.dcor, record.bytes)
    return records


def split_inference(client, server, session, ids):
    """ inference across the cut points, always with the server's full backbone

    Returns:
        (logits Tensor, bytes exchanged)
    """
    start = len(session.transcript)
    with session.phase(INFERENCE):
        if client.architecture == Architecture.OFFSITE:
            _to_server(session, client, server, ACTIVATION, encode_raw(np.asarray(ids, dtype=np.float32)))
            logits = client.decode_tensor(_from_server(session, client, ACTIVATION))
        else:
            theta = client.input_adapter(ids)
            _to_server(session, client, server, ACTIVATION, client.codec.encode(theta, tensor_id=1))
            b = client.decode_tensor(_from_server(session, client, ACTIVATION))
            logits = client.output_adapter(b)
    return logits, _since(session, start)[1]


def emulator_inference(client, ids):
    """ the client's adapters over its emulator, no messages """
    return client.output_adapter(client.emulator(client.input_adapter(ids)))


def replay_server(transcript, server):
    """ feed the client messages of a transcript to a fresh server

    Every reply must match the recorded one byte for byte.

    Returns:
        the server, in the state the recorded server ended in
    """
    expected = deque()
    for message in transcript:
        if message.sender == CLIENT:
            expected.extend(payload for _, payload in server.handle(message))
            continue
        if message.kind == MessageKind.MODEL_TRANSFER:
            reply = server.transfer_payload()
        elif expected:
            reply = expected.popleft()
        else:
            raise ProtocolError(f'recorded server message {message.seq} has no request')
        if reply != message.payload:
            raise ProtocolError(f'replayed server message {message.seq} ({message.kind.name}) differs')
    if expected:
        raise ProtocolError(f'{len(expected)} replayed replies were never recorded')
    return server


class MonolithicTrainer:
    """ single-machine training of the same layers, the reference the split runs are held to

    Args:
        partition (ModelPartition): copied, the original is not modified
        optimizer (OptimizerConfig): Adam settings
        architecture (Architecture): which layers run and which train,
            sl/online: all layers train, gradfree: only the output adapter,
            offline/offsite: adapters over the frozen emulator
    """

    def __init__(self, partition, optimizer, architecture=Architecture.ONLINE):
        self.architecture = Architecture(architecture)
        partition = partition.copy()
        self.config = partition.config
        middle = partition.emulator if self.architecture.trains_locally else partition.backbone
        self.layers = (partition.input_adapter.layer_indices + middle.layer_indices
                       + partition.output_adapter.layer_indices)
        self.params = OrderedDict()
        for segment in (partition.input_adapter, middle, partition.output_adapter):
            self.params.update(segment.params)
        if self.architecture.trains_locally:
            middle.freeze()
        elif self.architecture == Architecture.GRADFREE:
            partition.input_adapter.freeze()
            middle.freeze()
        self.optimizer = optimizer.build([p for p in self.params.values() if p.requires_grad])
        self.losses = []

    def step(self, batch):
        ids, targets = batch
        with Tape():
            loss = T.cross_entropy_loss(self.forward(ids), targets)
        T.backward(loss)
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.losses.append(loss.item())
        return loss.item()

    def forward(self, ids):
        return stack_forward(self.params, self.config, self.layers, ids)
