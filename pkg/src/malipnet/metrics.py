"""Edit-distance error rates (CER / WER)."""

from dataclasses import dataclass


@dataclass(frozen=True)
class EditOps:
    S: int = 0
    D: int = 0
    I: int = 0  # noqa: E741
    N: int = 0

    @property
    def distance(self):
        return self.S + self.D + self.I

    def __add__(self, other):
        return EditOps(self.S + other.S, self.D + other.D, self.I + other.I, self.N + other.N)


def edit_distance(ref, hyp):
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Counts are recovered by backtrace, preferring substitution (or match),
    then deletion, then insertion when several moves are optimal.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ri != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)
    S = D = I = 0  # noqa: E741
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return EditOps(S, D, I, n)


def error_rate(ops):
    """(S + D + I) / N; can exceed 1 when insertions dominate."""
    if ops.N == 0:
        raise ValueError("empty reference: error rate undefined for N = 0")
    return ops.distance / ops.N


def corpus_error_rate(pairs):
    """Micro-averaged rate over (ref, hyp) token-sequence pairs."""
    total = EditOps()
    for ref, hyp in pairs:
        total = total + edit_distance(ref, hyp)
    return error_rate(total)


def char_tokens(text):
    return list(text)


def word_tokens(text):
    return text.split(" ") if text else []


def cer(ref, hyp):
    return error_rate(edit_distance(char_tokens(ref), char_tokens(hyp)))


def wer(ref, hyp):
    return error_rate(edit_distance(word_tokens(ref), word_tokens(hyp)))
