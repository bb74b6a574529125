"""Independent reference implementations used as test oracles.

These are deliberately naive loop transcriptions that share no code with the
package under test.
"""

import itertools

import numpy as np


def conv_loops(x, k, bias, stride=1, pad_h=0, pad_w=0, groups=1):
    n_batch, cin, h, w = x.shape
    cout, cg, kh_size, kw_size = k.shape
    og = cout // groups
    ho = (h + 2 * pad_h - kh_size) // stride + 1
    wo = (w + 2 * pad_w - kw_size) // stride + 1
    out = np.zeros((n_batch, cout, ho, wo))
    for n, co, i, j in itertools.product(range(n_batch), range(cout), range(ho), range(wo)):
        g = co // og
        acc = 0.0 if bias is None else float(bias[co])
        for c, a, b in itertools.product(range(cg), range(kh_size), range(kw_size)):
            r = i * stride - pad_h + a
            s = j * stride - pad_w + b
            if 0 <= r < h and 0 <= s < w:
                acc += x[n, g * cg + c, r, s] * k[co, c, a, b]
        out[n, co, i, j] = acc
    return out


def shape_rule(i, t):
    return {"VC": (i, 1), "HC": (1, i), "VR": (i, i - 2), "HR": (i - 2, i), "S": (i, i)}[t]


def argmax_lowest(row):
    best = 0
    for c in range(1, len(row)):
        if row[c] > row[best]:
            best = c
    return best


def acc_oracle(probs, labels):
    return sum(argmax_lowest(p) == y for p, y in zip(probs, labels)) / len(labels)


def bacc_oracle(probs, labels):
    pred = [argmax_lowest(p) for p in probs]
    recalls = []
    for c in sorted(set(int(y) for y in labels)):
        idx = [s for s in range(len(labels)) if labels[s] == c]
        recalls.append(sum(pred[s] == c for s in idx) / len(idx))
    return sum(recalls) / len(recalls)


def mf1_oracle(probs, labels):
    pred = [argmax_lowest(p) for p in probs]
    f1s = []
    for c in sorted(set(int(y) for y in labels) | set(pred)):
        tp = sum(1 for p, y in zip(pred, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(pred, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(pred, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / len(f1s)


def auc_oracle(probs, labels):
    vals = []
    for c in range(len(probs[0])):
        pos = [probs[s][c] for s in range(len(labels)) if labels[s] == c]
        neg = [probs[s][c] for s in range(len(labels)) if labels[s] != c]
        if not pos or not neg:
            continue
        hits = 0
        for pi in pos:
            for pj in neg:
                if pi > pj:
                    hits += 1
        vals.append(hits / (len(pos) * len(neg)))
    return sum(vals) / len(vals)


def _in_bin(conf, b, n_bins):
    lo, hi = b / n_bins, (b + 1) / n_bins
    return lo < conf <= hi or (b == 0 and conf == 0.0)


def ece_from_oracle(conf, correct, n_bins):
    total = len(conf)
    err = 0.0
    for b in range(n_bins):
        members = [s for s in range(total) if _in_bin(conf[s], b, n_bins)]
        if not members:
            continue
        acc = sum(correct[s] for s in members) / len(members)
        con = sum(conf[s] for s in members) / len(members)
        err += len(members) / total * abs(acc - con)
    return err


def ece_oracle(probs, labels, n_bins):
    conf = [max(p) for p in probs]
    correct = [1.0 if argmax_lowest(p) == y else 0.0 for p, y in zip(probs, labels)]
    return ece_from_oracle(conf, correct, n_bins)


def cece_oracle(probs, labels, n_bins):
    n_classes = len(probs[0])
    total = 0.0
    for c in range(n_classes):
        conf = [p[c] for p in probs]
        correct = [1.0 if y == c else 0.0 for y in labels]
        total += ece_from_oracle(conf, correct, n_bins)
    return total / n_classes


def brier_oracle(probs, labels):
    total = 0.0
    for p, y in zip(probs, labels):
        for c in range(len(p)):
            o = 1.0 if c == y else 0.0
            total += (p[c] - o) ** 2
    return total / len(labels)


def random_prediction_set(rng, max_samples=64, max_classes=7):
    n_classes = int(rng.integers(2, max_classes + 1))
    n = int(rng.integers(2, max_samples + 1))
    logits = rng.normal(0, 2, size=(n, n_classes))
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n)
    return probs, labels
