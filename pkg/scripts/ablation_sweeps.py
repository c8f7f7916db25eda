"""Sweeps of the cutoff T (at r=0) and of the weak weight r (at T=0.9), for both flavors.

Writes ``ablation_<flavor>.csv`` plus one SVG per sweep and flavor to ``--out``,
and prints the Spearman correlations used by the acceptance test.
"""

import argparse
from pathlib import Path

from scipy.stats import spearmanr

from sag import experiment as ex
from sag import svg, tables
from sag.config import plan_lines, standard_plan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--checkpoint", default="runs/standard/model.ckpt")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = standard_plan()
    bundle = ex.load_or_train(plan, args.checkpoint)
    subject = plan.references.subject
    for emb in (ex.invert(bundle, plan), ex.encode(bundle, plan)):
        flavor = ex.flavor_of(emb)
        rows = ex.ablation_rows(bundle, emb, plan, subject, flavor)
        tables.write_csv(out / f"ablation_{flavor}.csv", "ablation", rows, plan_lines(plan))
        base = next(r for r in rows if r["sweep"] == "baseline")
        print(f"{flavor}: cfg baseline content {base['content_alignment']:.3f} subject {base['subject_alignment']:.3f}")
        for sweep in ("T", "r"):
            pts = [r for r in rows if r["sweep"] == sweep]
            xs = [p[sweep] for p in pts]
            content = [p["content_alignment"] for p in pts]
            subj = [p["subject_alignment"] for p in pts]
            for p in pts:
                print(f"  {sweep}={p[sweep]:<5g} content {p['content_alignment']:.3f} subject {p['subject_alignment']:.3f}")
            print(f"  rho(content, {sweep}) = {spearmanr(xs, content)[0]:+.2f}"
                  f"  rho(subject, {sweep}) = {spearmanr(xs, subj)[0]:+.2f}")
            chart = svg.Chart(f"{flavor} flavor", sweep, "alignment", reverse_x=True)
            chart.series += [svg.Series("content", xs, content), svg.Series("subject", xs, subj)]
            svg.write(chart, out / f"ablation_{flavor}_{sweep}.svg")


if __name__ == "__main__":
    main()
