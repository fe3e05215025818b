"""
the two protocol endpoints

The server is the model provider. It owns the pre-trained partition, keeps
the backbone, and ships adapters (and for local tuning an emulator) to the
client. The client owns its data and the adapters it fine-tunes. Neither
endpoint ever reads the other's memory: everything crosses the Session as
bytes.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from guarded_tuning.checkpoint import decode_checkpoint, encode_checkpoint
from guarded_tuning.codec import TensorCodec
from guarded_tuning.decorrelation import DecorrelationConfig
from guarded_tuning.errors import ContractError, InvariantViolation, ProtocolError
from guarded_tuning.model import BACKBONE, EMULATOR, INPUT, OUTPUT, Emulator, Segment, unsplit_forward
from guarded_tuning.optim import Adam
from guarded_tuning.protocol.messages import CLIENT, SERVER, TRAIN, MessageKind
from guarded_tuning.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

# segment name prefixes inside MODEL_TRANSFER checkpoints
_SEGMENT_SEPARATOR = '/'


class Architecture(str, Enum):
    SL = 'sl'
    ONLINE = 'online'
    GRADFREE = 'gradfree'
    OFFLINE = 'offline'
    OFFSITE = 'offsite'

    @property
    def exchanges_gradients(self):
        return self in (Architecture.SL, Architecture.ONLINE)

    @property
    def trains_locally(self):
        return self in (Architecture.OFFLINE, Architecture.OFFSITE)

    @property
    def ships_emulator(self):
        return self.trains_locally

    @property
    def client_trains_input_adapter(self):
        return self != Architecture.GRADFREE


@dataclass
class EndpointFlags:
    server_finetunes_backbone: bool = True
    quantize_enabled: bool = True
    decorrelation: DecorrelationConfig = field(default_factory=DecorrelationConfig)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self, params):
        return Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def pack_segments(segments):
    """ one checkpoint holding several segments, names prefixed by segment kind """
    state = OrderedDict()
    for segment in segments:
        for name, param in segment.params.items():
            state[f'{segment.kind}{_SEGMENT_SEPARATOR}{name}'] = param
    return encode_checkpoint(state)


def unpack_segments(payload, config, dtype=np.float32):
    """ the inverse of pack_segments: kind => Segment (Emulator for the emulator) """
    grouped = OrderedDict()
    for key, value in decode_checkpoint(payload, dtype=dtype).items():
        kind, _, name = key.partition(_SEGMENT_SEPARATOR)
        grouped.setdefault(kind, OrderedDict())[name] = value
    segments = OrderedDict()
    for kind, state in grouped.items():
        cls = Emulator if kind == EMULATOR else Segment
        segments[kind] = cls.from_state(kind, state, config, requires_grad=kind != EMULATOR, dtype=dtype)
    return segments


class Endpoint:
    """ common state of both endpoints

    Args:
        role (str): CLIENT or SERVER
        architecture (Architecture): the protocol being run
        flags (EndpointFlags): backbone tuning, quantization and decorrelation settings
        codec (TensorCodec): frames every tensor this endpoint sends
        optimizer (OptimizerConfig): Adam settings for the segments it trains
    """

    def __init__(self, role, architecture, flags=None, codec=None, optimizer=None):
        self.role = role
        self.architecture = Architecture(architecture)
        self.flags = flags or EndpointFlags()
        self.codec = codec or TensorCodec(enabled=self.flags.quantize_enabled)
        self.optimizer_config = optimizer or OptimizerConfig()
        self.segments = OrderedDict()
        self.optimizer = None
        self.bytes_sent = 0
        self.bytes_received = 0
        self.dtype = np.float32

    def __repr__(self):
        return f'<{self.__class__.__name__}({self.architecture.value}, segments={list(self.segments)})>'

    def holds(self, kind):
        return kind in self.segments

    def count_sent(self, message):
        self.bytes_sent += message.payload_byte_len
        return message

    def count_received(self, message):
        self.bytes_received += message.payload_byte_len
        return message

    def decode_tensor(self, payload, requires_grad=False):
        return Tensor(self.codec.decode(payload, dtype=self.dtype), requires_grad=requires_grad, dtype=self.dtype)


class ClientEndpoint(Endpoint):
    """ the data owner, fine-tuning the adapters it received """

    def __init__(self, architecture, flags=None, codec=None, optimizer=None, dtype=np.float32):
        super().__init__(CLIENT, architecture, flags, codec, optimizer)
        self.dtype = np.dtype(dtype).type
        self.config = None
        self.losses = []

    @property
    def input_adapter(self):
        return self.segments[INPUT]

    @property
    def output_adapter(self):
        return self.segments[OUTPUT]

    @property
    def emulator(self):
        return self.segments.get(EMULATOR)

    def install(self, payload, config):
        """ build private copies of the segments in a MODEL_TRANSFER payload """
        received = unpack_segments(payload, config, dtype=self.dtype)
        if BACKBONE in received:
            raise InvariantViolation('the client must never hold backbone weights')
        if EMULATOR in received and not self.architecture.ships_emulator:
            raise InvariantViolation(f'{self.architecture.value} does not use an emulator')
        self.config = config
        self.segments.update(received)
        if EMULATOR in self.segments:
            self.segments[EMULATOR].freeze()
        if not self.architecture.client_trains_input_adapter:
            self.input_adapter.freeze()
        self.optimizer = self.optimizer_config.build(self.trainable())
        logger.debug('client installed %s', {k: list(s.layer_indices) for k, s in self.segments.items()})
        return self

    def trainable(self):
        params = []
        for kind in (INPUT, OUTPUT):
            params.extend(self.segments[kind].trainable())
        return params

    def upload_payload(self):
        """ the fine-tuned adapters, for the offsite baseline """
        return pack_segments([self.input_adapter, self.output_adapter])


class ServerEndpoint(Endpoint):
    """ the model provider, running the backbone on the client's behalf

    handle() maps one received message to the list of (kind, payload) replies,
    so the server is a pure function of the messages it receives and replaying
    a transcript reproduces its state.
    """

    def __init__(self, partition, architecture, flags=None, codec=None, optimizer=None):
        super().__init__(SERVER, architecture, flags, codec, optimizer)
        self.config = partition.config
        self.dtype = partition.input_adapter.params['tok_emb'].dtype.type
        self.pretrained = partition
        self.segments[BACKBONE] = partition.backbone
        if self.architecture.ships_emulator and partition.emulator is None:
            raise ContractError(f'{self.architecture.value} needs an emulator in the partition')
        tunes = self.flags.server_finetunes_backbone and self.architecture.exchanges_gradients
        for param in self.backbone.parameters():
            param.requires_grad = tunes
        self.optimizer = self.optimizer_config.build(self.backbone.parameters()) if tunes else None
        self.uploaded = None
        self.losses = []
        self._pending = None

    @property
    def backbone(self):
        return self.segments[BACKBONE]

    def transfer_payload(self):
        """ adapters, plus the emulator for local-tuning architectures """
        segments = [self.pretrained.input_adapter, self.pretrained.output_adapter]
        if self.architecture.ships_emulator:
            segments.append(self.pretrained.emulator)
        return pack_segments(segments)

    def handle(self, message):
        if message.sender != CLIENT:
            raise ProtocolError('the server only handles client messages')
        handler = {
            MessageKind.ACTIVATION_FRAME: self._on_activation,
            MessageKind.GRADIENT_FRAME: self._on_gradient,
            MessageKind.LOSS_REPORT: self._on_loss,
            MessageKind.MODEL_TRANSFER: self._on_upload,
            MessageKind.CONTROL: lambda m: [],
        }[message.kind]
        return handler(message)

    def _on_activation(self, message):
        if self.uploaded is not None:
            return self._offsite_forward(message)
        training = message.phase == TRAIN and self.architecture.exchanges_gradients
        if not training:
            a_in = self.decode_tensor(message.payload)
            b = self.backbone(a_in)
            return [(MessageKind.ACTIVATION_FRAME, self.codec.encode(b, tensor_id=2))]
        a_in = self.decode_tensor(message.payload, requires_grad=True)
        tape = Tape()
        with tape:
            b = self.backbone(a_in)
        self._pending = (tape, a_in, b)
        return [(MessageKind.ACTIVATION_FRAME, self.codec.encode(b, tensor_id=2))]

    def _on_gradient(self, message):
        if not self.architecture.exchanges_gradients:
            raise InvariantViolation(f'gradient frame in a {self.architecture.value} session')
        if self._pending is None:
            raise ProtocolError('gradient frame without a preceding activation frame')
        tape, a_in, b = self._pending
        self._pending = None
        grad_b = self.codec.decode(message.payload, dtype=self.dtype)
        tape.backward([(b, grad_b)])
        if self.optimizer is not None:
            self.optimizer.step()
            self.optimizer.zero_grad()
        return [(MessageKind.GRADIENT_FRAME, self.codec.encode(a_in.grad, tensor_id=3))]

    def _on_loss(self, message):
        self.losses.append(float(np.frombuffer(message.payload, dtype='<f8')[0]))
        return []

    def _on_upload(self, message):
        if self.architecture != Architecture.OFFSITE:
            raise InvariantViolation(f'client upload in a {self.architecture.value} session')
        self.uploaded = unpack_segments(message.payload, self.config, dtype=self.dtype)
        return []

    def _offsite_forward(self, message):
        # offsite serves raw token ids with the uploaded adapters and its full backbone
        ids = np.rint(self.codec.decode(message.payload, dtype=np.float64)).astype(np.int64)
        params = OrderedDict()
        params.update(self.uploaded[INPUT].params)
        params.update(self.backbone.params)
        params.update(self.uploaded[OUTPUT].params)
        logits = unsplit_forward(params, self.config, ids)
        return [(MessageKind.ACTIVATION_FRAME, self.codec.encode(logits, tensor_id=4))]


def loss_payload(loss):
    return np.asarray([float(loss)], dtype='<f8').tobytes()

