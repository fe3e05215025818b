import numpy as np


def lcs_length(reference, hypothesis):
    """ length of the longest common subsequence, O(len(ref) * len(hyp)) """
    ref, hyp = list(reference), list(hypothesis)
    if not ref or not hyp:
        return 0
    previous = np.zeros(len(hyp) + 1, dtype=np.int64)
    for token in ref:
        current = np.zeros_like(previous)
        for j, other in enumerate(hyp, start=1):
            current[j] = previous[j - 1] + 1 if token == other else max(previous[j], current[j - 1])
        previous = current
    return int(previous[-1])


def rouge_l_f1(reference, hypothesis):
    """ ROUGE-L F1 over token ids, scaled to [0, 100] """
    reference, hypothesis = list(reference), list(hypothesis)
    lcs = lcs_length(reference, hypothesis)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 100.0 * 2 * precision * recall / (precision + recall)


def batch_rouge_l_f1(references, hypotheses):
    """ mean ROUGE-L F1 over paired sequences """
    scores = [rouge_l_f1(ref, hyp) for ref, hyp in zip(references, hypotheses)]
    return float(np.mean(scores)) if scores else 0.0
