"""Show what borrowing rules from other tools does to each heuristic tool.

    python3 demos/heuristic_union.py [--per-family 30] [--seed 11]

Recall can only go up because rules are added to an ANY combination.
Precision is free to drop, and the table shows where it does.
"""

from __future__ import annotations

import argparse
import tempfile

from packval.corpus import generate_corpus, ingest
from packval.diagnostics import profile_rules, profile_ruleset
from packval.oracle import default_registry, derive_oracle_labels
from packval.pipeline import load_images, rule_log
from packval.repair import plan_heuristic_fix
from packval.rules import TOOL_HEURISTICS, RuleConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-family", type=int, default=30)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    n = args.per_family
    with tempfile.TemporaryDirectory() as tmp:
        out, _ = generate_corpus({"MOCKX": n, "MOCKR": n, "MOCKN": n, "unpacked": n}, args.seed, tmp)
        images, _ = load_images(ingest(out))
    labels, _ = derive_oracle_labels({k: v.raw for k, v in images.items()}, {}, default_registry(False))
    profiles = {p.rule: p for p in profile_rules(rule_log(images, RuleConfig()), labels)}
    groups = sorted({v.family for v in labels.values()} - {"NOT_PACKED"})

    print(f"{'tool':24s} {'recall':>15s} {'precision':>15s}  added")
    for tool, rs in TOOL_HEURISTICS.items():
        fixed = plan_heuristic_fix(rs, profiles, groups)
        b, a = profile_ruleset(rs, profiles, labels).metrics, profile_ruleset(fixed, profiles, labels).metrics
        added = [str(r) for r in fixed.members[len(rs.members):]]
        print(f"{tool:24s} {b.recall:6.1f} -> {a.recall:5.1f} {b.precision:6.1f} -> {a.precision:5.1f}  "
              f"{', '.join(added) if added else '-'}")


if __name__ == "__main__":
    main()
