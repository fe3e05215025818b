from guarded_tuning.protocol.messages import (MessageKind, ProtocolMessage, Session, Transcript,  # noqa
                                              QueueTransport, LoopbackTransport, CLIENT, SERVER,
                                              TRANSFER, TRAIN, INFERENCE)
from guarded_tuning.protocol.endpoints import (Architecture, ClientEndpoint, ServerEndpoint,  # noqa
                                               EndpointFlags, OptimizerConfig)
from guarded_tuning.protocol.architectures import (setup, online_train_step, gradfree_train_step,  # noqa
                                                   offline_finetune, finetune, split_inference,
                                                   emulator_inference, replay_server, open_session,
                                                   MonolithicTrainer, StepRecord)
from guarded_tuning.protocol.accounting import CommReport, account, shared_layer_count  # noqa
