"""Independent reference computations whose outputs are frozen into the C++ tests.

Run: python3 tests/oracles/oracles.py
"""
import math
import re

MASK = (1 << 64) - 1
DEFAULT_SEED = 0x5EEDA11D00000001


def hash_token(token: str, seed: int) -> int:
    h = 0xCBF29CE484222325 ^ seed
    for b in token.encode():
        h ^= b
        h = (h * 0x100000001B3) & MASK
    h = (h + 0x9E3779B97F4A7C15) & MASK
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & MASK
    return h ^ (h >> 31)


def embed(posts, d, seed=DEFAULT_SEED):
    acc = [0.0] * d
    for post in posts:
        for tok in re.findall(r"[0-9a-z\x80-\U0010ffff]+", post.lower()):
            h = hash_token(tok, seed)
            acc[h % d] += -1.0 if h >> 63 else 1.0
    acc = [a / len(posts) for a in acc]
    n = math.sqrt(sum(a * a for a in acc))
    return [a / n for a in acc] if n > 0 else acc


def f1(tp, fp, fn):
    return 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def macro_f1_from_pairs(pred, label):
    tp = sum(1 for p, y in zip(pred, label) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(pred, label) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(pred, label) if p == 0 and y == 1)
    tn = sum(1 for p, y in zip(pred, label) if p == 0 and y == 0)
    return 0.5 * (f1(tp, fp, fn) + f1(tn, fn, fp))


def sign_test(wins, losses):
    n = wins + losses
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


if __name__ == "__main__":
    print("embed 'call call phone' d=8:", [repr(x) for x in embed(["call call phone"], 8)])
    print("hash_token('call', default):", hex(hash_token("call", DEFAULT_SEED)))
    kaggle = macro_f1_from_pairs([1] * 1735, [1] * 1314 + [0] * 421)
    print("Kaggle I/E all-class-1 macro-F1:", repr(kaggle))
    print("balanced 50/50 constant-1 macro-F1:", repr(macro_f1_from_pairs([1] * 100, [1] * 50 + [0] * 50)))
    print("sign test 5/0:", sign_test(5, 0), " 4/1:", sign_test(4, 1), " 3/0:", sign_test(3, 0))
    print("ln 4:", repr(math.log(4)), " ln 2:", repr(math.log(2)))
