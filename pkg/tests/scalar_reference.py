"""Independent pure-Python (list and loop) re-implementation of the model forward pass.

Used as an oracle for the numpy implementation; it shares no code with the
package beyond reading parameter arrays.
"""

import math


def _mat(a):
    return [list(map(float, row)) for row in a]


def vec_mat(v, w):
    rows, cols = len(w), len(w[0])
    return [sum(v[i] * w[i][j] for i in range(rows)) for j in range(cols)]


def layer_norm(v, g, b, eps=1e-5):
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(v[i] - mu) * inv * g[i] + b[i] for i in range(n)]


def gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def block(xs, p, prefix, heads, causal):
    """One pre-norm block over a list of row vectors; returns (rows, attention[h][q][k])."""
    g = lambda name: p[f"{prefix}.{name}"]  # noqa: E731
    n, d = len(xs), len(xs[0])
    dh = d // heads
    hs = [layer_norm(x, g("ln1.g"), g("ln1.b")) for x in xs]
    wqkv, bqkv = _mat(g("attn.qkv.w")), list(g("attn.qkv.b"))
    qkv = [[a + b for a, b in zip(vec_mat(h, wqkv), bqkv)] for h in hs]
    attn = []
    ctx = [[0.0] * d for _ in range(n)]
    for hd in range(heads):
        qo, ko, vo = hd * dh, d + hd * dh, 2 * d + hd * dh
        rows = []
        for i in range(n):
            scores = []
            for j in range(n):
                if causal and j > i:
                    scores.append(-math.inf)
                else:
                    s = sum(qkv[i][qo + c] * qkv[j][ko + c] for c in range(dh))
                    scores.append(s / math.sqrt(dh))
            finite = [s for s in scores if s != -math.inf]
            m = max(finite)
            e = [0.0 if s == -math.inf else math.exp(s - m) for s in scores]
            tot = sum(e)
            w = [x / tot for x in e]
            rows.append(w)
            for c in range(dh):
                ctx[i][qo + c] = sum(w[j] * qkv[j][vo + c] for j in range(n))
        attn.append(rows)
    wo, bo = _mat(g("attn.out.w")), list(g("attn.out.b"))
    xs = [[x + a + b for x, a, b in zip(xs[i], vec_mat(ctx[i], wo), bo)] for i in range(n)]
    w1, b1 = _mat(g("mlp.fc1.w")), list(g("mlp.fc1.b"))
    w2, b2 = _mat(g("mlp.fc2.w")), list(g("mlp.fc2.b"))
    out = []
    for x in xs:
        h = layer_norm(x, g("ln2.g"), g("ln2.b"))
        h = [gelu(a + b) for a, b in zip(vec_mat(h, w1), b1)]
        out.append([xi + a + b for xi, a, b in zip(x, vec_mat(h, w2), b2)])
    return out, attn


def encoder(patches, p, layers, heads):
    w, b, pos = _mat(p["enc.patch.w"]), list(p["enc.patch.b"]), _mat(p["enc.pos"])
    xs = [[a + bb + c for a, bb, c in zip(vec_mat(list(row), w), b, pos[i])] for i, row in enumerate(patches)]
    for i in range(layers):
        xs, _ = block(xs, p, f"enc.block{i}", heads, causal=False)
    return [layer_norm(x, p["enc.ln_f.g"], p["enc.ln_f.b"]) for x in xs]


def mapper(rows, p, activation="tanh"):
    w1, b1 = _mat(p["map.fc1.w"]), list(p["map.fc1.b"])
    w2, b2 = _mat(p["map.fc2.w"]), list(p["map.fc2.b"])
    out = []
    for r in rows:
        h = [a + b for a, b in zip(vec_mat(list(r), w1), b1)]
        if activation == "tanh":
            h = [math.tanh(x) for x in h]
        out.append([a + b for a, b in zip(vec_mat(h, w2), b2)])
    return out


def decoder(inputs, p, layers, heads, report_start):
    """inputs: list of d_t rows (image tokens then embedded text). Returns (logits rows, last attention)."""
    xs = [list(map(float, r)) for r in inputs]
    attn = None
    for i in range(layers):
        xs, attn = block(xs, p, f"dec.block{i}", heads, causal=True)
    table = _mat(p["dec.tok"])
    logits = []
    for x in xs[report_start:]:
        h = layer_norm(x, p["dec.ln_f.g"], p["dec.ln_f.b"])
        logits.append([sum(h[c] * row[c] for c in range(len(h))) for row in table])
    return logits, attn


def cross_entropy(logits_row, target):
    m = max(logits_row)
    lse = m + math.log(sum(math.exp(x - m) for x in logits_row))
    return lse - logits_row[target]
