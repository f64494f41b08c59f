#!/usr/bin/env python3
"""Corpus statistics computed independently of the C++ loader.

Usage: corpus_stats.py CORPUS.json [OUT.json]
"""
import json
import sys
from collections import Counter


def stats(tasks):
    words = [len(t["instruction"].split()) for t in tasks]
    return {
        "tasks": len(tasks),
        "mean_set_size": sum(t["set_size"] for t in tasks) / len(tasks),
        "mean_word_count": sum(words) / len(tasks),
        "per_group": dict(sorted(Counter(t["group"] for t in tasks).items())),
        "per_subcategory": dict(sorted(Counter(t["subcategory"] for t in tasks).items())),
        "per_set_size": {str(k): v for k, v in sorted(Counter(t["set_size"] for t in tasks).items())},
    }


def main():
    with open(sys.argv[1], encoding="utf-8") as f:
        result = stats(json.load(f))
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if len(sys.argv) > 2:
        with open(sys.argv[2], "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


if __name__ == "__main__":
    main()
