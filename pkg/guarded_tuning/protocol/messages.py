"""
protocol messages, their framing, the session that orders them, and the
transports that carry them between the two endpoints

Message framing (little-endian)::

    magic "GTMS" | version u8 | session_id u64 | sequence u64 | kind u8 | flags u8 | payload length u64 | payload

flags bit 0 is the direction (0 client to server, 1 server to client),
bits 1-2 the phase (0 transfer, 1 train, 2 inference). A transcript is the
concatenation of every delivered message in delivery order.
"""
import contextlib
import logging
import queue
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

from guarded_tuning.errors import DecodeError, InvariantViolation, ProtocolError

logger = logging.getLogger(__name__)

MAGIC = b'GTMS'
VERSION = 1
HEADER = struct.Struct('<4sBQQBBQ')

CLIENT, SERVER = 'client', 'server'
TRANSFER, TRAIN, INFERENCE = 'transfer', 'train', 'inference'
PHASES = (TRANSFER, TRAIN, INFERENCE)
ROLES = (CLIENT, SERVER)


class MessageKind(IntEnum):
    ACTIVATION_FRAME = 1
    GRADIENT_FRAME = 2
    MODEL_TRANSFER = 3
    LOSS_REPORT = 4
    CONTROL = 5


def peer(role):
    return SERVER if role == CLIENT else CLIENT


@dataclass(frozen=True)
class ProtocolMessage:
    session_id: int
    seq: int
    kind: MessageKind
    payload: bytes
    sender: str = CLIENT
    phase: str = TRAIN

    @property
    def payload_byte_len(self):
        return len(self.payload)

    @property
    def receiver(self):
        return peer(self.sender)

    @property
    def direction(self):
        return f'{self.sender}->{self.receiver}'

    def to_bytes(self):
        flags = (0 if self.sender == CLIENT else 1) | (PHASES.index(self.phase) << 1)
        return HEADER.pack(MAGIC, VERSION, self.session_id, self.seq, int(self.kind),
                           flags, len(self.payload)) + self.payload

    @classmethod
    def read_from(cls, buffer, offset=0):
        """ parse one message at offset, return (message, next offset) """
        if offset + HEADER.size > len(buffer):
            raise DecodeError('truncated message header', offset)
        magic, version, session_id, seq, kind, flags, length = HEADER.unpack_from(buffer, offset)
        if magic != MAGIC:
            raise DecodeError(f'bad message magic {bytes(magic)!r}', offset)
        if version != VERSION:
            raise DecodeError(f'unsupported message version {version}', offset + 4)
        try:
            kind = MessageKind(kind)
        except ValueError:
            raise DecodeError(f'unknown message kind {kind}', offset + 21) from None
        phase = (flags >> 1) & 0b11
        if flags >> 3 or phase >= len(PHASES):
            raise DecodeError(f'invalid message flags {flags:#04x}', offset + 22)
        start = offset + HEADER.size
        if start + length > len(buffer):
            raise DecodeError(f'truncated payload, need {length} bytes', start)
        payload = bytes(buffer[start:start + length])
        message = cls(session_id, seq, kind, payload,
                      sender=SERVER if flags & 1 else CLIENT, phase=PHASES[phase])
        return message, start + length

    @classmethod
    def from_bytes(cls, buffer):
        message, end = cls.read_from(buffer)
        if end != len(buffer):
            raise DecodeError(f'{len(buffer) - end} trailing bytes after message', end)
        return message


class Transcript:
    """ the ordered record of every message delivered in a session """

    def __init__(self, messages=None):
        self.messages = list(messages or [])

    def __iter__(self):
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    def __getitem__(self, index):
        return self.messages[index]

    def append(self, message):
        self.messages.append(message)

    def filter(self, kind=None, sender=None, phase=None):
        return Transcript(m for m in self.messages
                          if (kind is None or m.kind == kind)
                          and (sender is None or m.sender == sender)
                          and (phase is None or m.phase == phase))

    def to_bytes(self):
        return b''.join(m.to_bytes() for m in self.messages)

    @classmethod
    def from_bytes(cls, buffer):
        messages, offset = [], 0
        while offset < len(buffer):
            message, offset = ProtocolMessage.read_from(buffer, offset)
            messages.append(message)
        return cls(messages)

    def write(self, path):
        with open(path, 'wb') as fout:
            fout.write(self.to_bytes())

    @classmethod
    def read(cls, path):
        with open(path, 'rb') as fin:
            return cls.from_bytes(fin.read())


class QueueTransport:
    """ in-process ordered duplex channel, one inbox per role """

    def __init__(self):
        self.inbox = {CLIENT: deque(), SERVER: deque()}

    def send(self, sender, data):
        self.inbox[peer(sender)].append(data)

    def receive(self, receiver):
        try:
            return self.inbox[receiver].popleft()
        except IndexError:
            raise ProtocolError(f'{receiver} inbox is empty') from None

    def pending(self, receiver):
        return len(self.inbox[receiver])

    def close(self):
        pass


def _recv_exact(sock, count):
    chunks, remaining = [], count
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


class LoopbackTransport:
    """ the same framing over a connected socket pair

    A reader thread per endpoint splits the byte stream back into messages,
    so large transfers never block the sending side.
    """

    def __init__(self, timeout=30):
        self.timeout = timeout
        client_sock, server_sock = socket.socketpair()
        self.sockets = {CLIENT: client_sock, SERVER: server_sock}
        self.inbox = {CLIENT: queue.Queue(), SERVER: queue.Queue()}
        self.readers = [threading.Thread(target=self._read, args=(role,), daemon=True,
                                         name=f'gt-loopback-{role}') for role in ROLES]
        for reader in self.readers:
            reader.start()

    def _read(self, role):
        sock = self.sockets[role]
        while True:
            try:
                header = _recv_exact(sock, HEADER.size)
            except OSError:
                return
            if header is None:
                return
            length = HEADER.unpack(header)[-1]
            payload = _recv_exact(sock, length) if length else b''
            if payload is None:
                logger.warning('%s socket closed mid-message', role)
                return
            self.inbox[role].put(header + payload)

    def send(self, sender, data):
        self.sockets[sender].sendall(data)

    def receive(self, receiver):
        try:
            return self.inbox[receiver].get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError(f'{receiver} received nothing within {self.timeout}s') from None

    def pending(self, receiver):
        return self.inbox[receiver].qsize()

    def close(self):
        for sock in self.sockets.values():
            with contextlib.suppress(OSError):
                sock.shutdown(socket.SHUT_RDWR)
            sock.close()
        for reader in self.readers:
            reader.join(timeout=self.timeout)


TRANSPORTS = {
    'queue': QueueTransport,
    'loopback': LoopbackTransport,
}


class Session:
    """ one client/server session: sequencing, phases and message policing

    Usage::

        session = Session(1)
        with session.phase(TRAIN):
            session.send(CLIENT, MessageKind.ACTIVATION_FRAME, payload)
            message = session.receive(SERVER, MessageKind.ACTIVATION_FRAME)

    Sequence numbers start at 0 and increase by one per direction. Every
    received message is appended to the transcript.
    """

    def __init__(self, session_id=1, transport=None, forbidden=()):
        self.session_id = session_id
        self.transport = transport if transport is not None else QueueTransport()
        self.transcript = Transcript()
        self.current_phase = TRAIN
        self.forbidden = set(forbidden)
        self.locked = False
        self._next_seq = {CLIENT: 0, SERVER: 0}
        self._expected_seq = {CLIENT: 0, SERVER: 0}

    def __repr__(self):
        return f'<Session({self.session_id}, {len(self.transcript)} messages, phase={self.current_phase})>'

    @contextlib.contextmanager
    def phase(self, name):
        if name not in PHASES:
            raise ValueError(f'unknown phase {name}')
        previous, self.current_phase = self.current_phase, name
        logger.debug('session %d: entering %s phase', self.session_id, name)
        try:
            yield self
        finally:
            self.current_phase = previous

    @contextlib.contextmanager
    def lock(self):
        """ no message may be sent inside this block """
        self.locked = True
        try:
            yield self
        finally:
            self.locked = False

    def send(self, sender, kind, payload):
        kind = MessageKind(kind)
        if self.locked:
            raise InvariantViolation(f'{sender} sent {kind.name} while the session is locked')
        if kind in self.forbidden:
            raise InvariantViolation(f'{kind.name} is not allowed in this session')
        message = ProtocolMessage(self.session_id, self._next_seq[sender], kind, bytes(payload),
                                  sender=sender, phase=self.current_phase)
        self._next_seq[sender] += 1
        self.transport.send(sender, message.to_bytes())
        logger.debug('seq %d %s %s %d bytes', message.seq, message.direction, kind.name, len(payload))
        return message

    def receive(self, receiver, expect=None):
        """ take the next message for receiver, checking session, order and kind """
        message = ProtocolMessage.from_bytes(self.transport.receive(receiver))
        if message.session_id != self.session_id:
            raise ProtocolError(f'message for session {message.session_id} in session {self.session_id}')
        if message.receiver != receiver:
            raise ProtocolError(f'{receiver} received a message sent by itself')
        expected = self._expected_seq[message.sender]
        if message.seq != expected:
            raise ProtocolError(f'{message.direction}: sequence {message.seq}, expected {expected}')
        if message.kind in self.forbidden:
            raise InvariantViolation(f'{message.kind.name} observed in a session that forbids it')
        if expect is not None and message.kind != expect:
            raise ProtocolError(f'{receiver} expected {MessageKind(expect).name}, got {message.kind.name}')
        self._expected_seq[message.sender] += 1
        self.transcript.append(message)
        return message

    def pending(self, receiver):
        return self.transport.pending(receiver)

    def close(self):
        self.transport.close()
