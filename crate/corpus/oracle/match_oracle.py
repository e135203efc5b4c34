"""Brute-force nearest-signature oracle for `mpu match` output.

Reads a dataset's SCHEMA/WEIGHTS/SIG records, scores every record by
weighted bit differences, sorts by (distance, record id) and prints the
same lines the CLI prints, sealed with an FNV-1a 64 MATCHHASH.

usage: python3 match_oracle.py DATASET QUERY K
"""
import sys


def fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def load(path):
    weights, sigs = None, []
    for line in open(path, encoding="utf-8"):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        if toks[0] == "SCHEMA":
            weights = [1] * int(toks[1])
        elif toks[0] == "WEIGHTS":
            weights = [int(t) for t in toks[1:]]
        elif toks[0] == "SIG":
            sigs.append((int(toks[1]), toks[2], [int(t, 16) for t in toks[3:]]))
    return weights, sigs


def main():
    path, query, k = sys.argv[1], sys.argv[2], int(sys.argv[3])
    weights, sigs = load(path)
    q = [int(t, 16) for t in query.split(",")]
    scored = []
    for rid, label, codes in sigs:
        d = sum(w * bin(a ^ b).count("1") for a, b, w in zip(q, codes, weights))
        scored.append((d, rid, label))
    scored.sort()
    out = "".join(f"{rid} {d} {label}\n" for d, rid, label in scored[:k])
    out += f"MATCHHASH {fnv1a(out.encode()):016x}\n"
    sys.stdout.write(out)


if __name__ == "__main__":
    main()
