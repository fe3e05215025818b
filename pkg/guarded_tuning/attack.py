"""
data reconstruction attacks by a curious server, run over recorded transcripts

The attacker sees exactly what the server sees: the adapters it shipped in
the transfer phase and every message the client sent. It reconstructs the
client's input tokens in three stages:

1. inverter: a small network trained on activations the attacker computes
   with its own copy of the shipped input adapter over an auxiliary corpus
2. initial reconstruction: the inverter's argmax on the observed activations
3. refinement: soft token logits optimized so that the re-encoded activations
   match the observed ones, then a discrete top-k coordinate search.
   With gradient frames available the search also matches the observed
   gradient against the one the attacker predicts with its output adapter
   copy under the candidate's shifted labels.

Every step is accept-if-better, so refinement never makes the matching
objective worse. Leakage is scored by ROUGE-L F1 against the true tokens.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from guarded_tuning import tensor as T
from guarded_tuning.codec import TensorCodec
from guarded_tuning.errors import ConfigError, ContractError, DimensionError
from guarded_tuning.model import INPUT, OUTPUT, embed_soft
from guarded_tuning.optim import Adam
from guarded_tuning.protocol.endpoints import unpack_segments
from guarded_tuning.protocol.messages import CLIENT, INFERENCE, SERVER, TRAIN, MessageKind
from guarded_tuning.rouge import batch_rouge_l_f1
from guarded_tuning.tasks import aux_corpus
from guarded_tuning.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

NOT_APPLICABLE = 'N/A'
INVERTER, ACTIVATION_MATCH, GRADIENT_MATCH = 'inverter', 'activation_match', 'gradient_match'
STAGES = (INVERTER, ACTIVATION_MATCH, GRADIENT_MATCH)
METHOD = 'three-stage surrogate DRA'
FINETUNE = 'finetune'

INVERTER_LR = 5e-3
INVERTER_BATCH = 32
HALVINGS = 3
SEARCH_ROUNDS = 2


@dataclass(frozen=True)
class AttackConfig:
    stages: tuple = STAGES
    steps: int = 20
    lr: float = 2.0
    seeds: tuple = (0,)
    cadence: int = 100
    inverter_steps: int = 400
    inverter_hidden: int = 256
    aux_size: int = 1024
    n_batches: int = 5
    top_k: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'stages', tuple(self.stages))
        object.__setattr__(self, 'seeds', tuple(self.seeds))

    def validate(self):
        errors = []
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            errors.append(f'attack.stages: unknown stages {unknown}, expected some of {list(STAGES)}')
        if self.stages and INVERTER not in self.stages:
            errors.append('attack.stages: every attack starts with the inverter stage')
        for name in ('steps', 'inverter_steps', 'inverter_hidden', 'aux_size', 'n_batches', 'top_k', 'cadence'):
            value = getattr(self, name)
            minimum = 0 if name == 'steps' else 1
            if not isinstance(value, int) or value < minimum:
                errors.append(f'attack.{name}: must be an integer >= {minimum}, got {value!r}')
        if self.lr <= 0:
            errors.append('attack.lr: must be > 0')
        if not self.seeds:
            errors.append('attack.seeds: need at least one seed')
        if errors:
            raise ConfigError(errors)
        return self


@dataclass
class AttackReport:
    """ ROUGE-L F1 leakage scores of one phase, NOT_APPLICABLE when nothing was observable """
    phase: str
    mean: object = NOT_APPLICABLE
    points: list = field(default_factory=list)
    stages: tuple = ()
    reason: str = ''
    method: str = METHOD

    @property
    def applicable(self):
        return self.mean != NOT_APPLICABLE

    @classmethod
    def not_applicable(cls, phase, reason):
        return cls(phase=phase, reason=reason)

    def to_dict(self):
        data = {'phase': self.phase, 'method': self.method, 'mean': self.mean,
                'stages': list(self.stages), 'points': self.points}
        if self.reason:
            data['reason'] = self.reason
        return data


class Inverter:
    """ two-layer perceptron from standardized cut-point activations to token logits """

    def __init__(self, d_model, hidden, vocab_size, seed, dtype=np.float32):
        rng = np.random.default_rng([seed, 3])
        self.w1 = Tensor(rng.standard_normal((d_model, hidden)) * np.sqrt(2.0 / d_model), requires_grad=True, dtype=dtype)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(rng.standard_normal((hidden, vocab_size)) * np.sqrt(1.0 / hidden), requires_grad=True, dtype=dtype)
        self.b2 = Tensor(np.zeros(vocab_size), requires_grad=True, dtype=dtype)
        self.mean = np.zeros(d_model, dtype=dtype)
        self.std = np.ones(d_model, dtype=dtype)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, activations):
        x = Tensor((np.asarray(activations) - self.mean) / self.std, dtype=self.w1.dtype)
        h = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def logits(self, activations):
        """ seq x vocab (or batch x seq x vocab) logits as an array """
        return self.forward(activations).data


def train_inverter(adapter_copy, corpus, seed, hidden=256, steps=400, batch_size=INVERTER_BATCH, lr=INVERTER_LR):
    """ fit an inverter on activations of the attacker's adapter copy over an auxiliary corpus

    Args:
        adapter_copy (Segment): the input adapter the server distributed
        corpus (ToyDataset): auxiliary sequences, disjoint from client data
        seed (int): initialization and sampling seed

    Returns:
        Inverter
    """
    if corpus is None or len(corpus) == 0:
        raise ConfigError('attack.aux_size: the inverter needs a non-empty auxiliary corpus')
    adapter = adapter_copy.copy(requires_grad=False)
    tokens = corpus.inputs
    activations = adapter(tokens).data
    d_model = activations.shape[-1]
    inverter = Inverter(d_model, hidden, adapter.config.vocab_size, seed, dtype=activations.dtype)
    flat = activations.reshape(-1, d_model)
    inverter.mean = flat.mean(axis=0).astype(activations.dtype)
    inverter.std = (flat.std(axis=0) + 1e-6).astype(activations.dtype)
    optimizer = Adam(inverter.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 4])
    for step in range(steps):
        rows = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        with Tape():
            loss = T.cross_entropy_loss(inverter.forward(activations[rows]), tokens[rows])
        T.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        if step % 100 == 0:
            logger.debug('inverter step %d loss %.4f', step, loss.item())
    return inverter


def coordinate_search(start, candidates, score_fn, rounds=SEARCH_ROUNDS):
    """ greedy per-position search over candidate tokens, accept-if-better

    Args:
        start (np.ndarray): batch x L initial tokens
        candidates (np.ndarray): batch x L x k candidate tokens per position
        score_fn (callable): (tokens N x L, rows N) => N scores, lower is better;
            rows maps each trial back to its batch row

    Returns:
        (tokens, scores)
    """
    current = np.array(start, dtype=np.int64)
    batch, length = current.shape
    k = candidates.shape[-1]
    everyone = np.arange(batch)
    rows = np.tile(everyone, k)
    best = score_fn(current, everyone)
    for _ in range(rounds):
        changed = False
        for j in range(length):
            trial = np.tile(current, (k, 1))
            trial[:, j] = candidates[:, j, :].T.reshape(-1)
            scores = score_fn(trial, rows).reshape(k, batch)
            pick = scores.argmin(axis=0)
            low = scores[pick, everyone]
            better = low < best
            current[better, j] = candidates[better, j, pick[better]]
            best = np.where(better, low, best)
            changed = changed or bool(better.any())
        if not changed:
            break
    return current, best


def _top_k(logits, k):
    k = min(k, logits.shape[-1])
    return np.argsort(-logits, axis=-1, kind='stable')[..., :k]


def _unit_rows(x):
    flat = x.reshape(len(x), -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.maximum(norms, 1e-30)


class Attacker:
    """ the curious server's reconstruction machinery

    Args:
        input_adapter (Segment): the input adapter as shipped
        output_adapter (Segment): the output adapter as shipped
        cfg (AttackConfig): stages and budgets
        seed (int): attack seed
    """

    def __init__(self, input_adapter, output_adapter, cfg, seed=0):
        self.input_adapter = input_adapter.copy(requires_grad=False)
        self.output_adapter = output_adapter.copy(requires_grad=False) if output_adapter is not None else None
        self.cfg = cfg
        self.seed = seed
        self.inverter = None
        self.decoder = TensorCodec(enabled=False)
        self.history = []

    @classmethod
    def from_transcript(cls, transcript, model_config, cfg, seed=0):
        """ an attacker holding the adapters the server shipped in the transfer phase """
        shipped = transcript.filter(kind=MessageKind.MODEL_TRANSFER, sender=SERVER)
        if not len(shipped):
            raise ContractError('the transcript has no model transfer from the server')
        segments = unpack_segments(shipped[0].payload, model_config)
        return cls(segments[INPUT], segments.get(OUTPUT), cfg, seed)

    def fit(self, corpus):
        self.inverter = train_inverter(self.input_adapter, corpus, self.seed, hidden=self.cfg.inverter_hidden,
                                       steps=self.cfg.inverter_steps)
        return self

    def decode(self, payload):
        return self.decoder.decode(payload, dtype=self.input_adapter.params['tok_emb'].dtype)

    # matching objectives, one value per sequence
    def activation_distance(self, tokens, observed):
        """ ||adapter(tokens) - observed||^2 / ||observed||^2 per sequence """
        produced = self.input_adapter(tokens).data.astype(np.float64)
        observed = observed.astype(np.float64)
        num = ((produced - observed) ** 2).reshape(len(tokens), -1).sum(axis=1)
        den = (observed ** 2).reshape(len(tokens), -1).sum(axis=1)
        return num / np.maximum(den, 1e-30)

    def predicted_gradient(self, targets, server_activation):
        """ gradient of the summed task loss w.r.t. the output adapter input """
        b = Tensor(server_activation, requires_grad=True)
        with Tape():
            loss = T.cross_entropy_loss(self.output_adapter(b), targets, reduction='sum')
        T.backward(loss)
        return b.grad

    def gradient_distance(self, targets, server_activation, observed_gradient):
        predicted = self.predicted_gradient(targets, server_activation)
        return ((_unit_rows(predicted) - _unit_rows(observed_gradient)) ** 2).sum(axis=1)

    def _soft_values(self, logits, observed, inv_norm, grad=False):
        z = Tensor(logits, requires_grad=grad)
        n = len(logits)
        tape = Tape()
        with tape:
            act = self.input_adapter.forward_embeddings(embed_soft(self.input_adapter, T.softmax(z, axis=-1)))
            diff = T.sub(act, Tensor(observed, dtype=act.dtype))
            per_seq = T.mul(T.sum(T.reshape(T.mul(diff, diff), (n, -1)), axis=1), Tensor(inv_norm, dtype=act.dtype))
            total = T.sum(per_seq)
        if not grad:
            return per_seq.data.astype(np.float64), None
        T.backward(total)
        return per_seq.data.astype(np.float64), z.grad

    def refine(self, logits, observed):
        """ stage 3 continuous relaxation: gradient steps on soft token logits

        Each step tries lr, lr/2, lr/4, lr/8 per sequence and keeps the first
        that lowers the objective, so the recorded objective never increases.

        Returns:
            (refined logits, objective history)
        """
        z = np.array(logits, dtype=observed.dtype)
        seq_len = z.shape[1]
        den = (observed.astype(np.float64) ** 2).reshape(len(z), -1).sum(axis=1)
        inv_norm = (1.0 / np.maximum(den, 1e-30)).astype(observed.dtype)
        values, _ = self._soft_values(z, observed, inv_norm)
        history = [float(values.sum())]
        for _ in range(self.cfg.steps):
            values, grad = self._soft_values(z, observed, inv_norm, grad=True)
            norms = np.sqrt((grad.astype(np.float64) ** 2).reshape(len(z), -1).sum(axis=1))
            pending = norms > 0
            direction = grad / np.maximum(norms, 1e-30)[:, None, None].astype(z.dtype) * np.sqrt(seq_len)
            trial_lr = np.full(len(z), self.cfg.lr)
            for _ in range(HALVINGS + 1):
                candidate = (z - trial_lr[:, None, None] * direction).astype(z.dtype)
                trial, _ = self._soft_values(candidate, observed, inv_norm)
                accept = pending & (trial < values)
                z[accept] = candidate[accept]
                values = np.where(accept, trial, values)
                pending &= ~accept
                if not pending.any():
                    break
                trial_lr = np.where(pending, trial_lr * 0.5, trial_lr)
            history.append(float(values.sum()))
        return z, history

    def _activation_stages(self, observed):
        """ stages 1-3 on one observed activation batch, returns (tokens, candidate logits) """
        if self.inverter is None:
            raise ContractError('fit the inverter before reconstructing')
        observed = np.asarray(observed)
        if observed.ndim != 3 or observed.shape[-1] != self.input_adapter.config.d_model:
            raise ContractError(f'activation frame of shape {observed.shape} does not match the adapter')
        logits = self.inverter.logits(observed)
        tokens = logits.argmax(axis=-1)
        if ACTIVATION_MATCH not in self.cfg.stages:
            return tokens, logits
        refined, history = self.refine(logits, observed)
        self.history.append(history)
        hard = refined.argmax(axis=-1)
        keep = self.activation_distance(hard, observed) < self.activation_distance(tokens, observed)
        tokens = np.where(keep[:, None], hard, tokens)
        tokens, _ = coordinate_search(tokens, _top_k(refined, self.cfg.top_k),
                                      lambda trial, rows: self.activation_distance(trial, observed[rows]))
        return tokens, refined

    def reconstruct(self, observed):
        """ batch x seq token ids from one observed activation batch (batch x seq x d) """
        return self._activation_stages(observed)[0]

    def reconstruct_with_gradients(self, observed, server_activation, observed_gradient):
        """ refine the activation-only reconstruction against the observed gradient frame too """
        if self.output_adapter is None:
            raise ContractError('gradient matching needs the shipped output adapter')
        tokens, logits = self._activation_stages(observed)
        candidates = _top_k(logits, self.cfg.top_k)
        answer_logits = self.output_adapter(Tensor(server_activation)).data[:, -1]
        answer_candidates = _top_k(answer_logits, self.cfg.top_k)
        start = np.concatenate([tokens, answer_candidates[:, :1]], axis=1)
        candidates = np.concatenate([candidates, answer_candidates[:, None, :]], axis=1)
        seq_len = tokens.shape[1]

        def score(trial, rows):
            return (self.activation_distance(trial[:, :seq_len], observed[rows])
                    + self.gradient_distance(trial[:, 1:], server_activation[rows], observed_gradient[rows]))

        extended, _ = coordinate_search(start, candidates, score)
        return extended[:, :seq_len]

    def attack_step(self, step):
        """ reconstruct the client tokens of one recorded step (or inference batch) """
        observed = self.decode(step['activation'])
        if observed.ndim == 2:
            # raw token ids, as the offsite baseline sends them
            return np.rint(observed).astype(np.int64)
        if GRADIENT_MATCH in self.cfg.stages and step.get('gradient') is not None:
            return self.reconstruct_with_gradients(observed, self.decode(step['server_activation']),
                                                   self.decode(step['gradient']))
        return self.reconstruct(observed)


def reconstruct_from_activations(frames, attacker):
    """ token sequences from activation frame payloads (stages 2 and 3) """
    return [attacker.reconstruct(attacker.decode(frame)) for frame in frames]


def gradient_matching_attack(activation_frames, gradient_frames, attacker, server_frames=None):
    """ joint activation and gradient matching, NOT_APPLICABLE without gradient frames

    Args:
        activation_frames (list): client activation frame payloads
        gradient_frames (list): client gradient frame payloads, one per activation frame
        attacker (Attacker): a fitted attacker
        server_frames (list): the server's activation frames of the same steps
    """
    if not gradient_frames:
        return NOT_APPLICABLE
    if len(gradient_frames) != len(activation_frames) or len(server_frames or ()) != len(activation_frames):
        raise DimensionError(f'{len(activation_frames)} activation frames, {len(gradient_frames)} gradient frames '
                             f'and {len(server_frames or ())} server frames')
    return [attacker.reconstruct_with_gradients(attacker.decode(a), attacker.decode(b), attacker.decode(g))
            for a, b, g in zip(activation_frames, server_frames, gradient_frames)]


def transcript_steps(transcript, phase):
    """ group the messages of a phase into steps, each opened by a client activation frame

    Returns:
        list of dicts with 'activation', 'server_activation' and 'gradient' payloads
    """
    steps = []
    for message in transcript.filter(phase=phase):
        if message.kind == MessageKind.ACTIVATION_FRAME and message.sender == CLIENT:
            steps.append({'activation': message.payload, 'server_activation': None, 'gradient': None})
        elif not steps:
            continue
        elif message.kind == MessageKind.ACTIVATION_FRAME:
            steps[-1]['server_activation'] = message.payload
        elif message.kind == MessageKind.GRADIENT_FRAME and message.sender == CLIENT:
            steps[-1]['gradient'] = message.payload
    return steps


def cadence_points(n_steps, cadence):
    """ evaluation points every cadence steps; a single point at the end when training is shorter """
    if n_steps == 0:
        return []
    if n_steps < cadence:
        return [n_steps]
    return [cadence * k for k in range(1, n_steps // cadence + 1)]


def evaluate_attack(transcript, cfg, model_config, train_references, eval_references, task_name, exclude=()):
    """ run the configured attack over a transcript for both phases

    Args:
        transcript (Transcript): the recorded session
        cfg (AttackConfig): stages, budgets, cadence and seeds
        model_config (ModelConfig): to rebuild the shipped adapters
        train_references (list): true input tokens of every training step
        eval_references (list): true input tokens of every inference batch
        task_name (str): the auxiliary corpus task
        exclude (iterable): datasets the auxiliary corpus must be disjoint from

    Returns:
        dict phase => AttackReport, phases 'finetune' and 'inference'
    """
    cfg.validate()
    phases = {FINETUNE: transcript_steps(transcript, TRAIN), INFERENCE: transcript_steps(transcript, INFERENCE)}
    references = {FINETUNE: train_references, INFERENCE: eval_references}
    batches = {}
    for phase, steps in phases.items():
        if not steps:
            continue
        if phase == FINETUNE:
            points = cadence_points(len(steps), cfg.cadence)
            batches[phase] = [(p, list(range(max(0, p - cfg.n_batches), p))) for p in points]
        else:
            batches[phase] = [(None, list(range(min(cfg.n_batches, len(steps)))))]
        short = [step for step, rows in batches[phase] if len(rows) < cfg.n_batches]
        if short:
            logger.warning('%s attack: %d of %d points average fewer than n_batches=%d batches',
                           phase, len(short), len(batches[phase]), cfg.n_batches)
    scores = {phase: {} for phase in batches}
    for seed in cfg.seeds:
        attacker = Attacker.from_transcript(transcript, model_config, cfg, seed)
        attacker.fit(aux_corpus(task_name, seed, cfg.aux_size, vocab_size=model_config.vocab_size,
                                seq_len=model_config.max_seq_len, exclude=exclude))
        for phase, plan in batches.items():
            wanted = sorted({i for _, rows in plan for i in rows})
            for i in wanted:
                tokens = attacker.attack_step(phases[phase][i])
                scores[phase].setdefault(i, []).append(batch_rouge_l_f1(references[phase][i], tokens))
            logger.debug('seed %d: attacked %d %s batches', seed, len(wanted), phase)
    reports = {}
    for phase in (FINETUNE, INFERENCE):
        if phase not in batches:
            reports[phase] = AttackReport.not_applicable(phase, f'no {phase} frames were transmitted')
            continue
        points = []
        for step, rows in batches[phase]:
            batch_scores = [round(float(np.mean(scores[phase][i])), 6) for i in rows]
            points.append({'step': step, 'n_batches': len(rows), 'batch_scores': batch_scores,
                           'mean': round(float(np.mean(batch_scores)), 6)})
        mean = round(float(np.mean([p['mean'] for p in points])), 6)
        reports[phase] = AttackReport(phase=phase, mean=mean, points=points, stages=cfg.stages)
    return reports
