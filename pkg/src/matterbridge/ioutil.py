"""Small shared I/O helpers: canonical JSON and JSONL files."""

import json


def canonical_json(obj):
    """Serialize with sorted keys and fixed separators.

    Byte-identical output for equal inputs, which checkpointing and
    config hashing rely on.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def read_jsonl(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
