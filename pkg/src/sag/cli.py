"""Command-line entry point: ``sag train|invert|encode|sample|ablate|report``.

Every command starts from the standard plan, applies ``--config`` on top of
it and then the flags. Outputs go to ``--out`` (a directory). CSVs and
checkpoints carry the resolved plan and code version; wall-clock times are
only written to the ``run.log`` sidecar.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 audit mismatch.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from sag import experiment as ex
from sag import svg, tables
from sag.checkpoint import CheckpointError, load_model, load_subject, save_model, save_subject
from sag.config import ConfigError, ExperimentPlan, apply_overrides, load_plan, plan_lines, save_plan, standard_plan
from sag.diffusion import schedule_from_description
from sag.guidance import GuidanceSpec, guide, weight_at
from sag.sampler import chain_generators, ddim_update, ddpm_step
from sag.train import TrainingDiverged
from sag.sampler import NonFiniteState
from sag.world import classify_style

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_AUDIT = 0, 1, 2, 3
AUDIT_TOL = 1e-10
MODE_ALIASES = {"cfg": "cfg_only", "cfg_only": "cfg_only", "dcfg": "dcfg"}


class UsageError(Exception):
    pass


class AuditError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "train": "train the denoiser and the subject encoder; writes model.ckpt and loss.csv",
        "invert": "fit a subject token to the references; writes subject.emb and loss.csv",
        "encode": "embed the references with the trained encoder; writes subject.emb",
        "sample": "guided sampling; writes samples.csv, summary.csv and trace.csv",
        "ablate": "evaluate the guidance grid; writes ablation.csv and SVG plots",
        "report": "validate CSV schemas and re-verify every traced sampler step",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", help="INI plan; flags override its values")
        s.add_argument("--checkpoint", help="model checkpoint (model.ckpt)")
        s.add_argument("--subject", help="invert/encode: subject id; sample/ablate: subject file or generic:<class>")
        s.add_argument("--style", type=int, help="prompt style id")
        s.add_argument("--w", type=float, help="guidance scale")
        s.add_argument("--r", type=float, help="weak-guidance weight for t <= T")
        s.add_argument("--T", type=float, help="guidance cutoff in normalised time")
        s.add_argument("--mode", choices=sorted(MODE_ALIASES), help="cfg or dcfg")
        s.add_argument("--steps", type=int, help="optimisation steps (train/invert) or sampler steps")
        s.add_argument("--seed", type=int, help="seed of the stage being run")
        s.add_argument("--out", help="output directory (report: directory to audit)")
    return p


# --- plan resolution -----------------------------------------------------------

def resolve_plan(args) -> ExperimentPlan:
    plan = load_plan(args.config) if args.config else standard_plan()
    cmd = args.command
    plan = apply_overrides(plan, "run", checkpoint=args.checkpoint, style=args.style, out=args.out)
    if args.subject is not None and cmd in ("invert", "encode"):
        try:
            subject = int(args.subject)
        except ValueError:
            raise ConfigError(f"--subject must be an integer subject id for {cmd}") from None
        plan = apply_overrides(plan, "references", subject=subject)
    elif args.subject is not None:
        plan = apply_overrides(plan, "run", subject=args.subject)
    mode = MODE_ALIASES[args.mode] if args.mode else None
    if cmd == "ablate":
        plan = apply_overrides(plan, "guidance", w=args.w)
        plan = apply_overrides(plan, "ablation", r_at=args.r, T_at=args.T)
    else:
        plan = apply_overrides(plan, "guidance", w=args.w, r=args.r, T=args.T, mode=mode)
    section = {"train": "train", "invert": "invert", "encode": "references"}.get(cmd, "sampler")
    if cmd == "train":
        plan = apply_overrides(plan, "train", steps=args.steps, seed=args.seed)
    elif cmd == "invert":
        plan = apply_overrides(plan, "invert", steps=args.steps, seed=args.seed)
    elif cmd == "encode":
        if args.steps is not None:
            raise ConfigError("--steps does not apply to encode")
        plan = apply_overrides(plan, section, seed=args.seed)
    else:
        plan = apply_overrides(plan, "sampler", num_steps=args.steps, seed=args.seed)
    return plan


def _out_dir(plan: ExperimentPlan) -> Path:
    out = Path(plan.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


class RunLog:
    """Sidecar log; the only output that contains wall-clock times."""

    def __init__(self, out: Path, command: str):
        self.path, self.command, self.t0 = out / "run.log", command, time.time()

    def write(self, message: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime())
        with open(self.path, "a") as fh:
            fh.write(f"{stamp} [{self.command}] {message}\n")

    def done(self) -> None:
        self.write(f"finished in {time.time() - self.t0:.2f} s")


def _meta(plan: ExperimentPlan, extra: dict | None = None) -> list[str]:
    lines = plan_lines(plan)
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return lines


def _load_bundle(plan: ExperimentPlan):
    if not plan.run.checkpoint:
        raise ConfigError("a checkpoint is required (--checkpoint)")
    path = Path(plan.run.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_model(path)


def _subject_conditions(plan: ExperimentPlan, bundle):
    """Return ``(c, c0, subject_id, flavor)`` for the configured subject."""
    spec = plan.run.subject
    if not spec:
        raise ConfigError("a subject is required (--subject FILE or generic:<class>)")
    if spec.startswith("generic:"):
        try:
            cls = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad generic subject {spec!r}") from None
        if not 0 <= cls < bundle.world.num_classes:
            raise ConfigError(f"generic class {cls} out of range")
        c, c0 = ex.generic_conditions(plan.run.style, cls)
        return c, c0, plan.references.subject, "generic"
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"subject file not found: {path}")
    emb, meta = load_subject(path)
    subject = int(meta.get("subject", plan.references.subject))
    flavor = ex.flavor_of(emb)
    c, c0 = ex.conditions(emb, plan.run.style, bundle.world.class_of(subject), flavor)
    return c, c0, subject, flavor


# --- commands ------------------------------------------------------------------

def cmd_train(plan: ExperimentPlan, out: Path, log: RunLog) -> None:
    result = ex.train_system(plan)
    meta = {"plan": plan_lines(plan)}
    result.bundle.meta.update(meta)
    save_model(out / "model.ckpt", result.bundle)
    rows = [{"stage": "train", "step": s, "loss": l} for s, l in result.base_log.losses]
    rows += [{"stage": "encoder", "step": s, "loss": l} for s, l in result.encoder_log.losses]
    tables.write_csv(out / "loss.csv", "loss", rows, _meta(plan))
    save_plan(plan, out / "plan.ini")
    log.write(f"base loss {result.base_log.initial:.4f} -> {result.base_log.final:.4f}")


def _cmd_subject(plan: ExperimentPlan, out: Path, log: RunLog, how: str) -> None:
    bundle = _load_bundle(plan)
    subject = plan.references.subject
    if subject >= bundle.world.num_subjects:
        raise ConfigError(f"subject {subject} out of range")
    emb = ex.invert(bundle, plan, subject) if how == "invert" else ex.encode(bundle, plan, subject)
    save_subject(out / "subject.emb", emb, {"subject": subject, "plan": plan_lines(plan)})
    if emb.trace:
        rows = [{"stage": "invert", "step": s, "loss": l} for s, l, _ in emb.trace]
        tables.write_csv(out / "loss.csv", "loss", rows, _meta(plan))
    log.write(f"{how} subject {subject}: |s| = {emb.norm:.4f}")


def cmd_invert(plan, out, log):
    _cmd_subject(plan, out, log, "invert")


def cmd_encode(plan, out, log):
    _cmd_subject(plan, out, log, "encode")


def cmd_sample(plan: ExperimentPlan, out: Path, log: RunLog) -> None:
    bundle = _load_bundle(plan)
    c, c0, subject, flavor = _subject_conditions(plan, bundle)
    spec = plan.guidance
    if spec.mode == "dcfg" and c0 is None:
        raise ConfigError("dcfg needs a learned subject; generic subjects only support cfg")
    ev = ex.evaluate(bundle, c, c0, spec, plan.sampler, subject, plan.run.style, record=True)
    extra = {"checkpoint.schedule": json.dumps(bundle.sched.describe(), sort_keys=True), "flavor": flavor}
    meta = _meta(plan, extra)
    labels = classify_style(bundle.world, ev.samples)
    rows = [{"chain": i, "x0": float(x[0]), "x1": float(x[1]), "style_label": int(l)}
            for i, (x, l) in enumerate(zip(ev.samples, labels))]
    tables.write_csv(out / "samples.csv", "samples", rows, meta)
    rep = ev.report
    summary = {"subject": subject, "style": plan.run.style, "w": spec.w, "r": spec.r, "T": spec.T,
               "mode": spec.mode, "flavor": flavor, "subject_alignment": rep.subject_alignment,
               "content_alignment": rep.content_alignment, "centroid_x": rep.centroid[0],
               "centroid_y": rep.centroid[1], "centroid_distance": rep.centroid_distance,
               "style_fractions": ";".join(repr(f) for f in rep.style_fractions), "n": rep.n,
               "seed": plan.sampler.seed, "model_calls": ev.trace.model_calls}
    tables.write_csv(out / "summary.csv", "summary", [summary], meta)
    tables.write_csv(out / "trace.csv", "trace", trace_rows(ev.trace, plan.run.trace_chains), meta)
    log.write(f"content {rep.content_alignment:.3f} subject {rep.subject_alignment:.3f}")


def trace_rows(trace, chains: int) -> list[dict]:
    rows = []
    n = min(chains, len(trace.x_before[0])) if trace.x_before else 0
    for i in range(trace.num_steps):
        for j in range(n):
            row = {"step": i, "k": trace.ks[i], "k_next": trace.k_next[i], "t_norm": trace.t_norm[i],
                   "alpha_bar": trace.alpha_bar[i], "alpha_bar_next": trace.alpha_bar_next[i],
                   "w_t": trace.w_t[i], "chain": j}
            for name in ("x_before", "eps_c", "eps_c0", "eps_null", "eps_tilde", "noise", "x_after"):
                arr = getattr(trace, name)[i]
                for d in range(2):
                    row[f"{name}_{d}"] = None if arr is None else float(arr[j, d])
            rows.append(row)
    return rows


def cmd_ablate(plan: ExperimentPlan, out: Path, log: RunLog) -> None:
    bundle = _load_bundle(plan)
    c, c0, subject, flavor = _subject_conditions(plan, bundle)
    if c0 is None:
        raise ConfigError("ablation needs a learned subject (subject file)")
    emb, _ = load_subject(plan.run.subject)
    # grid points share nothing but the read-only model; they run in order here
    rows = ex.ablation_rows(bundle, emb, plan, subject, flavor)
    tables.write_csv(out / "ablation.csv", "ablation", rows, _meta(plan))
    for sweep, key, label in (("T", "T", "cutoff T (r fixed)"), ("r", "r", "weak weight r (T fixed)")):
        pts = [r for r in rows if r["sweep"] == sweep]
        if not pts:
            continue
        chart = svg.Chart(f"{flavor} flavor, w = {plan.guidance.w:g}", label, "alignment", reverse_x=True)
        xs = [p[key] for p in pts]
        chart.series.append(svg.Series("content", xs, [p["content_alignment"] for p in pts]))
        chart.series.append(svg.Series("subject", xs, [p["subject_alignment"] for p in pts]))
        base = [r for r in rows if r["sweep"] == "baseline"]
        if base:
            lo, hi = min(xs), max(xs)
            chart.series.append(svg.Series("content (cfg)", [lo, hi], [base[0]["content_alignment"]] * 2, True))
            chart.series.append(svg.Series("subject (cfg)", [lo, hi], [base[0]["subject_alignment"]] * 2, True))
        svg.write(chart, out / f"ablation_{sweep}.svg")
    log.write(f"{len(rows)} grid points")


# --- report --------------------------------------------------------------------

def _close(a, b) -> bool:
    return bool(np.all(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) <= AUDIT_TOL))


def _spec_from_meta(meta: dict) -> GuidanceSpec:
    g = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("guidance.")}
    return GuidanceSpec(w=float(g["w"]), r=float(g["r"]), T=float(g["T"]), mode=g["mode"], schedule=g["schedule"])


def audit_trace(path) -> int:
    """Recompute every traced step; raises :class:`AuditError` on the first mismatch."""
    meta, _, rows = tables.read_csv(path)
    spec = _spec_from_meta(meta)
    sched = schedule_from_description(json.loads(meta["checkpoint.schedule"]))
    kind, eta, seed = meta["sampler.kind"], float(meta["sampler.ddim_eta"]), int(meta["sampler.seed"])
    vec = lambda row, name: np.array([float(row[f"{name}_0"]), float(row[f"{name}_1"])])
    last: dict[int, tuple[int, np.ndarray]] = {}
    prev_k: dict[int, int] = {}
    for n, row in enumerate(rows):
        where = f"{path} row {n} (step {row['step']}, chain {row['chain']})"
        step, chain, k, kn = int(row["step"]), int(row["chain"]), int(row["k"]), int(row["k_next"])
        t = float(row["t_norm"])
        if not _close(t, k / sched.num_steps):
            raise AuditError(f"{where}: t_norm does not match k")
        if not (_close(float(row["alpha_bar"]), sched.alpha_bar(k))
                and _close(float(row["alpha_bar_next"]), sched.alpha_bar(kn))):
            raise AuditError(f"{where}: alpha_bar does not match the schedule")
        if chain in prev_k and not kn < k < prev_k[chain]:
            raise AuditError(f"{where}: step indices do not decrease")
        prev_k[chain] = k
        x_before = vec(row, "x_before")
        if step == 0:
            if not _close(x_before, chain_generators(seed, chain + 1)[chain].standard_normal(2)):
                raise AuditError(f"{where}: initial state does not match the seeded draw")
        elif chain not in last or last[chain][0] != step - 1 or not _close(x_before, last[chain][1]):
            raise AuditError(f"{where}: chain is not continuous with the previous step")
        eps_c, eps_null, eps_tilde = vec(row, "eps_c"), vec(row, "eps_null"), vec(row, "eps_tilde")
        eps_c0 = vec(row, "eps_c0") if spec.mode == "dcfg" else None
        if spec.mode == "dcfg":
            if not _close(float(row["w_t"]), weight_at(spec, t)):
                raise AuditError(f"{where}: w_t does not match the weight schedule")
        elif row["w_t"] != "":
            raise AuditError(f"{where}: cfg step carries a weak-guidance weight")
        g = guide(eps_c, eps_c0, eps_null, spec, t)
        if not _close(g.eps_tilde, eps_tilde):
            raise AuditError(f"{where}: guided prediction does not match the guidance algebra")
        noise = vec(row, "noise")
        if kind == "ddpm_ancestral":
            x_new = ddpm_step(x_before, eps_tilde, k, sched, noise=noise)
        else:
            x_new = ddim_update(x_before, eps_tilde, sched.alpha_bar(k), sched.alpha_bar(kn), eta, noise)
        x_after = vec(row, "x_after")
        if not _close(x_new, x_after):
            raise AuditError(f"{where}: update does not match the sampler rule")
        last[chain] = (step, x_after)
    return len(rows)


def _audit_samples(run: Path, trace_path: Path) -> None:
    """Final traced states must equal the first rows of samples.csv."""
    samples = run / "samples.csv"
    if not samples.is_file():
        return
    _, _, srows = tables.read_csv(samples)
    _, _, trows = tables.read_csv(trace_path)
    if not trows:
        return
    final = max(int(r["step"]) for r in trows)
    for r in trows:
        if int(r["step"]) == final:
            s = srows[int(r["chain"])]
            if not _close(tables.floats(s, "x0", "x1"), tables.floats(r, "x_after_0", "x_after_1")):
                raise AuditError(f"{samples}: chain {r['chain']} differs from its trace")


def cmd_report(plan: ExperimentPlan, out: Path, log: RunLog) -> None:
    csvs = sorted(out.glob("*.csv"))
    if not csvs:
        raise ConfigError(f"no CSV files in {out}")
    for path in csvs:
        try:
            kind = tables.validate(path)
        except tables.SchemaError as exc:
            raise AuditError(str(exc)) from None
        print(f"{path.name}: schema {kind} ok")
    trace = out / "trace.csv"
    if trace.is_file():
        n = audit_trace(trace)
        _audit_samples(out, trace)
        print(f"trace.csv: {n} step records verified (tolerance {AUDIT_TOL:g})")
        log.write(f"audit ok, {n} records")


COMMANDS = {"train": cmd_train, "invert": cmd_invert, "encode": cmd_encode, "sample": cmd_sample,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if not args.out:
                raise ConfigError("report needs --out DIR")
            out = Path(args.out)
            if not out.is_dir():
                raise ConfigError(f"not a directory: {out}")
            plan = standard_plan()
        else:
            plan = resolve_plan(args)
            out = _out_dir(plan)
        log = RunLog(out, args.command)
        log.write("argv " + " ".join(sys.argv[1:] if argv is None else argv))
        COMMANDS[args.command](plan, out, log)
        log.done()
        return EXIT_OK
    except (ConfigError, CheckpointError, UsageError, tables.SchemaError, FileNotFoundError) as exc:
        print(f"sag {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteState, FloatingPointError) as exc:
        print(f"sag {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AuditError as exc:
        print(f"sag {args.command}: audit mismatch: {exc}", file=sys.stderr)
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())
