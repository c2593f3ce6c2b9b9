"""Independent reference implementations the tests check the library against.

Everything here is written with plain Python loops and math.* so that a
bug in the library's vectorized numpy path cannot hide in a shared helper.
"""

import math


def py_dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def py_cosine(a, b):
    na = math.sqrt(py_dot(a, a))
    nb = math.sqrt(py_dot(b, b))
    c = py_dot(a, b) / (na * nb)
    return max(-1.0, min(1.0, c))


def py_softmax(logits, mask):
    sel = [float(l) for l, m in zip(logits, mask) if m]
    top = max(sel)
    z = sum(math.exp(l - top) for l in sel)
    out = []
    for l, m in zip(logits, mask):
        out.append(math.exp(float(l) - top) / z if m else 0.0)
    return out


def naive_attend(queries, keys, values, counts, allowed, d_h):
    """Triple-loop scaled dot-product attention with the ln(count) bias."""
    n_q, n_k = len(queries), len(keys)
    dim_v = len(values[0])
    outputs = [[0.0] * dim_v for _ in range(n_q)]
    mass = [0.0] * n_k
    scale = math.sqrt(d_h)
    for i in range(n_q):
        logits = [
            py_dot(queries[i], keys[j]) / scale + math.log(float(counts[j]))
            for j in range(n_k)
        ]
        weights = py_softmax(logits, [allowed[i][j] for j in range(n_k)])
        for j in range(n_k):
            if weights[j]:
                mass[j] += weights[j]
                for t in range(dim_v):
                    outputs[i][t] += weights[j] * float(values[j][t])
    return outputs, mass


def morton_oracle(ix, iy, iz):
    """Bit-at-a-time interleave of the three biased 21-bit indices."""
    bias = 1 << 20
    ux, uy, uz = ix + bias, iy + bias, iz + bias
    code = 0
    for b in range(21):
        code |= ((ux >> b) & 1) << (3 * b)
        code |= ((uy >> b) & 1) << (3 * b + 1)
        code |= ((uz >> b) & 1) << (3 * b + 2)
    return code


def decayed_score(mass_sequence, gamma):
    """Replay s <- gamma * s + m step by step."""
    s = 0.0
    for m in mass_sequence:
        s = gamma * s + float(m)
    return s


def geometric_closed_form(a, gamma, t):
    """Score after t updates with constant mass a: a * (1 - gamma^t) / (1 - gamma)."""
    return a * (1.0 - gamma**t) / (1.0 - gamma)


class FusionOracle:
    """One-pass weighted-mean accumulator mirroring iterative fusion.

    Feed it the same items in the same order; it recomputes each item's
    weight from its own running mean, so it shares no state with the
    implementation under test.
    """

    def __init__(self, first_vec, first_weight):
        self.num = [first_weight * float(x) for x in first_vec]
        self.den = first_weight

    def mean(self):
        return [x / self.den for x in self.num]

    def add(self, vec, weight):
        for t, x in enumerate(vec):
            self.num[t] += weight * float(x)
        self.den += weight


class VoxelMirror:
    """Plain-Python replay of single-voxel routing and fusion.

    Long-term entries are kept as weighted-sum accumulators (numerator
    lists plus the omega-sum Z) rather than running means, so agreement
    with the library's in-place mean updates is a real check of the
    recurrences, not a shared formula.
    """

    def __init__(self, merge_lambda, g_cap, e_cap):
        self.lam = merge_lambda
        self.g_cap = g_cap
        self.e_cap = e_cap
        self.long_term = []  # dicts: knum, vnum, z, count, score
        self.buffer = []  # dicts: key, value, score, count

    @staticmethod
    def _mean(num, den):
        return [x / den for x in num]

    def key_mean(self, rep):
        return self._mean(rep["knum"], rep["z"])

    def value_mean(self, rep):
        return self._mean(rep["vnum"], rep["z"])

    def count_mass(self):
        held = sum(r["count"] for r in self.long_term)
        return held + sum(t["count"] for t in self.buffer)

    def _fuse(self, rep, key, value, count, omega):
        for t, x in enumerate(key):
            rep["knum"][t] += omega * float(x)
        for t, x in enumerate(value):
            rep["vnum"][t] += omega * float(x)
        rep["z"] += omega
        rep["count"] += count

    def insert(self, key, value, score, count=1):
        key = [float(x) for x in key]
        value = [float(x) for x in value]
        best, best_cos = None, -2.0
        for rep in self.long_term:
            c = py_cosine(self.key_mean(rep), key)
            if c > best_cos:
                best, best_cos = rep, c
        if best is not None and best_cos > self.lam:
            self._fuse(best, key, value, count, math.exp(best_cos))
            return "fused"
        self.buffer.append({"key": key, "value": value, "score": score, "count": count})
        if len(self.buffer) >= self.e_cap:
            self._aggregate()
            return "aggregated"
        return "buffered"

    def _aggregate(self):
        pivot = max(self.buffer, key=lambda t: t["score"])
        omegas = [math.e if t is pivot else math.exp(py_cosine(pivot["key"], t["key"]))
                  for t in self.buffer]
        d = len(pivot["key"])
        rep = {
            "knum": [sum(w * t["key"][i] for w, t in zip(omegas, self.buffer)) for i in range(d)],
            "vnum": [sum(w * t["value"][i] for w, t in zip(omegas, self.buffer)) for i in range(d)],
            "z": sum(omegas),
            "count": sum(t["count"] for t in self.buffer),
            "score": pivot["score"],
        }
        self.buffer = []
        self._admit(rep)

    def _admit(self, rep):
        if len(self.long_term) >= self.g_cap:
            if self.g_cap == 1:
                old = self.long_term.pop()
                c = py_cosine(self.key_mean(rep), self.key_mean(old))
                self._fuse(rep, self.key_mean(old), self.value_mean(old),
                           old["count"], math.exp(c))
            else:
                vi = min(range(len(self.long_term)), key=lambda i: (self.long_term[i]["z"], i))
                victim = self.long_term.pop(vi)
                bi, bc = 0, -2.0
                for i, r in enumerate(self.long_term):
                    c = py_cosine(self.key_mean(r), self.key_mean(victim))
                    if c > bc:
                        bi, bc = i, c
                self._fuse(self.long_term[bi], self.key_mean(victim),
                           self.value_mean(victim), victim["count"], math.exp(bc))
        self.long_term.append(rep)
