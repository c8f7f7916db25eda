"""Content ignorance under plain CFG, and the dual-guidance remedy.

Trains the standard system (or reuses ``--checkpoint``), builds subject 0
from style-0 references both by inversion and with the encoder, then
samples "subject 0 in style 1" with CFG and with DCFG (r=0, T=0.9).
Writes a table and one scatter plot per flavor to ``--out``.
"""

import argparse
from pathlib import Path

import numpy as np

from sag import experiment as ex
from sag import svg, tables
from sag.config import plan_lines, standard_plan
from sag.guidance import GuidanceSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/failure")
    ap.add_argument("--checkpoint", default="runs/standard/model.ckpt")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plan = standard_plan()
    bundle = ex.load_or_train(plan, args.checkpoint)
    subject, style, w = plan.references.subject, plan.run.style, plan.guidance.w
    centers = bundle.world.centers()
    rows = []
    for emb in (ex.invert(bundle, plan), ex.encode(bundle, plan)):
        flavor = ex.flavor_of(emb)
        c, c0 = ex.conditions(emb, style, bundle.world.class_of(subject), flavor)
        chart = svg.Chart(f"subject {subject} in style {style} ({flavor})", "x", "y", ylim=None)
        for sweep, spec in (("baseline", GuidanceSpec(w=w, mode="cfg_only")),
                            ("T", GuidanceSpec(w=w, r=0.0, T=0.9, mode="dcfg"))):
            ev = ex.evaluate(bundle, c, c0, spec, plan.sampler, subject, style)
            rep = ev.report
            rows.append({"sweep": sweep, "flavor": flavor, "w": spec.w, "r": spec.r, "T": spec.T,
                         "mode": spec.mode, "subject_alignment": rep.subject_alignment,
                         "content_alignment": rep.content_alignment, "n": rep.n, "seed": plan.sampler.seed})
            print(f"{flavor:9s} {spec.mode:8s} content {rep.content_alignment:.3f}  subject {rep.subject_alignment:.3f}")
            x = ev.samples[:400]
            chart.series.append(svg.Series(spec.mode, list(x[:, 0]), list(x[:, 1]), markers_only=True))
        chart.series.append(svg.Series("subject centres", list(centers[:, 0]), list(centers[:, 1]),
                                       markers_only=True))
        lim = bundle.world.ring_radius + 3 * bundle.world.ring_sigma + float(np.abs(centers).max())
        chart.xlim, chart.ylim = (-lim, lim), (-lim, lim)
        chart.width = chart.height + 130
        svg.write(chart, out / f"samples_{flavor}.svg")
    tables.write_csv(out / "failure.csv", "ablation", rows, plan_lines(plan))


if __name__ == "__main__":
    main()
