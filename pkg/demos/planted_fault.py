"""Break a signature database on purpose, then let diagnosis and repair fix it.

    python3 demos/planted_fault.py [--per-family 30] [--seed 7]

The target database loses its MOCKX signatures and gains a mislabeled one
that really matches the MOCKR stub. The oracle is built from unpacking
alone, so it exposes both faults, and the plan removes the bad entry and
borrows the MOCKX signature from the donor database.
"""

from __future__ import annotations

import argparse
import tempfile
from importlib import resources

from packval.corpus import generate_corpus, ingest
from packval.diagnostics import score_family, score_signatures
from packval.normalize import canonicalize_label
from packval.oracle import default_registry, derive_oracle_labels
from packval.pipeline import load_images, signature_match_log, signature_predictions
from packval.repair import apply_signature_fix, plan_signature_fix
from packval.rules import default_signature_db
from packval.signatures import load_signature_db, parse_signature_db

PLANTED = "[ASPack v2.12 (planted)]\nsignature = 55 8B EC 83 C4 F0 B8\nep_only = true\n"
POLICY = "peid"


def recall_line(images, db, oracle):
    preds = signature_predictions(images, [db], POLICY)
    return "  ".join(f"{f} {score_family(preds, oracle, f).recall:5.1f}" for f in ("MOCKX", "MOCKR"))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-family", type=int, default=30)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    n = args.per_family
    with tempfile.TemporaryDirectory() as tmp:
        out, _ = generate_corpus({"MOCKX": n, "MOCKR": n, "MOCKN": n, "unpacked": n}, args.seed, tmp)
        images, _ = load_images(ingest(out))
    print(f"corpus: {len(images)} samples")

    labels, _ = derive_oracle_labels({k: v.raw for k, v in images.items()}, {}, default_registry(False))
    print("oracle:", dict(sorted(__import__("collections").Counter(v.family for v in labels.values()).items())))

    base = default_signature_db()
    target = base.with_entries([s for s in base.entries if canonicalize_label(s.label).family != "MOCKX"]
                               + list(parse_signature_db(PLANTED).entries))
    print(f"\nrecall before repair:  {recall_line(images, target, labels)}")

    with resources.as_file(resources.files("packval.data").joinpath("donor_userdb.txt")) as p:
        donor = load_signature_db(p, "donor")
    scores = score_signatures(target, signature_match_log(target, images, POLICY), labels)
    donor_scores = score_signatures(donor, signature_match_log(donor, images, POLICY), labels)
    plan = plan_signature_fix(target, scores, [(donor, donor_scores)], labels)

    print("\nplan:")
    for why in plan.rationale:
        if why["action"] == "remove":
            print(f"  remove {why['label']!r}: {why['correct']}/{why['matches']} correct, hits {why['per_family']}")
        else:
            print(f"  add    {why['label']!r} from {why['donor']}: family {why['family']} "
                  f"was at {why['target_family_recall']:.0f}% recall")

    fixed = apply_signature_fix(target, plan)
    print(f"\nrecall after repair:   {recall_line(images, fixed, labels)}")


if __name__ == "__main__":
    main()
