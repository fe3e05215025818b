"""
communication accounting over a session transcript

Byte totals count payload bytes (payload_byte_len), so they do not depend on
the transport. The shared-layer count is the number of distinct pre-trained
transformer layers the server sent to the client, a proxy for how much of its
model the server gave away.
"""
from dataclasses import dataclass, field

from guarded_tuning.checkpoint import decode_checkpoint
from guarded_tuning.protocol.messages import CLIENT, PHASES, SERVER, MessageKind


@dataclass
class CommReport:
    total_bytes: int = 0
    message_count: int = 0
    shared_layer_count: int = 0
    by_direction: dict = field(default_factory=dict)
    by_kind: dict = field(default_factory=dict)
    by_phase: dict = field(default_factory=dict)

    @property
    def finetune_bytes(self):
        """ everything needed to fine-tune: the transfers plus the training traffic """
        return self.by_phase.get('transfer', 0) + self.by_phase.get('train', 0)

    def to_dict(self):
        return {
            'total_bytes': self.total_bytes,
            'finetune_bytes': self.finetune_bytes,
            'message_count': self.message_count,
            'shared_layer_count': self.shared_layer_count,
            'by_direction': dict(self.by_direction),
            'by_kind': dict(self.by_kind),
            'by_phase': dict(self.by_phase),
        }


def shared_layer_count(transcript):
    layers = set()
    for message in transcript.filter(kind=MessageKind.MODEL_TRANSFER, sender=SERVER):
        for key in decode_checkpoint(message.payload):
            name = key.split('/', 1)[-1]
            if name.startswith('layer.'):
                layers.add(int(name.split('.')[1]))
    return len(layers)


def account(transcript):
    """ totals by direction, message kind and phase for a closed session """
    report = CommReport(
        by_direction={f'{CLIENT}->{SERVER}': 0, f'{SERVER}->{CLIENT}': 0},
        by_kind={kind.name: 0 for kind in MessageKind},
        by_phase={phase: 0 for phase in PHASES},
    )
    for message in transcript:
        size = message.payload_byte_len
        report.total_bytes += size
        report.message_count += 1
        report.by_direction[message.direction] += size
        report.by_kind[message.kind.name] += size
        report.by_phase[message.phase] += size
    report.shared_layer_count = shared_layer_count(transcript)
    return report
