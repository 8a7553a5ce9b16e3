"""Follow the oracle on one sample of each kind and print every contract it checks.

    python3 demos/oracle_walkthrough.py [--seed 3]

Predictions are deliberately wrong or missing, so the label-guided phase
fails and the exhaustive sweep has to find the answer.
"""

from __future__ import annotations

import argparse

import numpy as np

from packval.corpus import random_base_pe
from packval.mock import mock_pack
from packval.oracle import default_registry, derive_oracle_label

CASES = (
    ("MOCKX packed, tools said UPX and ASPack", "MOCKX", {"UPX", "ASPack"}),
    ("MOCKR packed, tools said MOCKX", "MOCKR", {"MOCKX"}),
    ("MOCKN packed, no tool fired", "MOCKN", set()),
    ("not packed, one tool said MOCKR", None, {"MOCKR"}),
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    registry = default_registry(include_upx=False)
    print("registry:", ", ".join(f"{u.id} ({u.kind.value})" for u in registry))
    for title, family, predictions in CASES:
        base = random_base_pe(rng)
        sample = mock_pack(base, family, args.seed) if family else base
        verdicts = []
        label = derive_oracle_label(sample, predictions, registry, verdicts=verdicts)
        print(f"\n{title}")
        for v in verdicts:
            checks = ""
            if v.validation and v.validation.checks:
                checks = " " + ",".join(k for k, ok in v.validation.checks.items() if ok)
            print(f"  {v.predicted_family or '-':8s} {v.unpacker_id or '(none)':15s} {v.outcome.value}{checks}")
        via = label.confirming_unpacker or label.generic_unpacker or "nothing"
        print(f"  => {label.family} ({label.provenance.value}, via {via})")


if __name__ == "__main__":
    main()
