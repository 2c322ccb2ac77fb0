"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint, cost, evaluation, fusion, gradcheck, labels, tensor
from .fusion import CageConfig, ConfigError, NeckLevel

log = logging.getLogger("cage")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Options loadable from ``--config``; CLI flags override them."""

    cage: dict | None = None
    seed: int = 0
    tolerance: float = 1e-4
    batch: int | None = None
    height: int | None = None
    width: int | None = None
    tokens: int | None = None
    tau: float = 0.95
    margin: float = 0.1
    score_floor: float = evaluation.DEFAULT_SCORE_FLOOR

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be an object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
        rc = cls(**data)
        if rc.cage is not None:
            CageConfig.from_dict(rc.cage)  # validate early
        return rc

    def cage_config(self, default: CageConfig | None = None) -> CageConfig | None:
        return CageConfig.from_dict(self.cage) if self.cage is not None else default


def _pick(flag, configured, default):
    if flag is not None:
        return flag
    return configured if configured is not None else default


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        tensor.atomic_write_bytes(path, text.encode("utf-8"))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gradcheck(args, rc: RunConfig) -> int:
    cfg = rc.cage_config(gradcheck.DEFAULT_CONFIG)
    shape = gradcheck.DEFAULT_SHAPE
    seeds = args.seeds if args.seeds else [rc.seed]
    tol = _pick(args.tol, rc.tolerance, 1e-4)
    old = fusion.SABOTAGE_PARAM
    fusion.SABOTAGE_PARAM = args.sabotage
    try:
        reports = [
            gradcheck.check_block(
                cfg, seed=s, tolerance=tol, mode=args.mode,
                batch=_pick(args.batch, rc.batch, shape["batch"]),
                height=_pick(args.height, rc.height, shape["height"]),
                width=_pick(args.width, rc.width, shape["width"]),
                tokens=_pick(args.tokens, rc.tokens, shape["tokens"]))
            for s in seeds
        ]
    finally:
        fusion.SABOTAGE_PARAM = old
    ok = all(r.passed for r in reports)
    worst = max((r.worst + (r.seed,) for r in reports), key=lambda w: w[1])
    if args.json:
        sys.stdout.write(_dump_json({
            "passed": ok, "tolerance": tol,
            "worst": {"name": worst[0], "error": worst[1], "seed": worst[2]},
            "runs": [r.to_dict() for r in reports]}))
    else:
        for r in reports:
            print(f"seed {r.seed} ({r.mode})")
            for name, err in r.groups().items():
                flag = "ok" if err < tol else "FAIL"
                print(f"  {name:<16} {err:.3e}  {flag}")
        print(f"{'PASS' if ok else 'FAIL'}: worst {worst[0]} = {worst[1]:.3e} (seed {worst[2]})")
    if not ok:
        print(f"gradient check failed; worst offender: {worst[0]}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def _parse_expect(items) -> dict[str, int]:
    out = {}
    for item in items or []:
        name, _, value = item.partition("=")
        if not value:
            raise UsageError(f"--expect wants LEVEL=CHANNELS, got {item!r}")
        out[name] = int(value)
    return out


def cmd_audit(args, rc: RunConfig) -> int:
    expect = _parse_expect(args.expect)
    unknown = set(expect) - {lv.name for lv in fusion.DEFAULT_NECK}
    if unknown:
        raise UsageError(f"unknown neck levels: {sorted(unknown)}")
    levels = [NeckLevel(lv.name, lv.c_in, lv.c_out, lv.height, lv.width, expect.get(lv.name))
              for lv in fusion.DEFAULT_NECK]
    reports = fusion.drop_in_check(levels, text_len=args.text_len, batch=args.batch,
                                   seed=rc.seed, run_forward=not args.no_forward)
    shape_problems = {}
    for lv in levels:
        cfg = fusion.level_config(lv)
        params = fusion.init_params(cfg, rc.seed)
        probs = fusion.shape_audit(params, cfg)
        if params.num_parameters() != cost.count_params(cfg).total_params:
            probs.append("parameter count disagrees with the cost model")
        if probs:
            shape_problems[lv.name] = probs
    failures = [r.level for r in reports if not r.ok]
    out = {
        "passed": not failures and not shape_problems,
        "levels": [{"level": r.level, "expected_shape": list(r.expected_shape),
                    "actual_shape": list(r.actual_shape), "ok": r.ok,
                    "params": r.params, "flops": r.flops} for r in reports],
        "shape_audit": shape_problems,
        "failed_levels": failures,
    }
    sys.stdout.write(_dump_json(out))
    for name in failures:
        print(f"drop-in contract violated at level {name}", file=sys.stderr)
    return EXIT_OK if out["passed"] else EXIT_FAIL


def cmd_cost(args, rc: RunConfig) -> int:
    cfg = rc.cage_config()
    payload: dict
    tables: list[str] = []
    reports: list[tuple[str, cost.CostReport]] = []
    comparison = None
    if cfg is not None:
        H = _pick(args.height, rc.height, 80)
        W = _pick(args.width, rc.width, 80)
        L = _pick(args.tokens, rc.tokens, 10)
        rep = cost.count_flops(cfg, H, W, L, _pick(args.batch, rc.batch, 1))
        reports.append(("custom", rep))
        payload = {"reports": {"custom": rep.to_dict()}}
        if args.baseline:
            spec = cost.BaselineSpec(cfg.c_in, cfg.c_out, cfg.embed_dim)
            base = cost.baseline_flops(spec, H, W, L, _pick(args.batch, rc.batch, 1))
            reports.append(("custom/baseline", base))
            comparison = {"levels": [cost.Comparison("custom", rep, base).to_dict()],
                          "baseline_label": "reference baseline"}
            payload["comparison"] = comparison
    else:
        L = _pick(args.tokens, rc.tokens, 10)
        payload = {"reports": {}}
        for lv in fusion.DEFAULT_NECK:
            rep = cost.count_flops(fusion.level_config(lv), lv.height, lv.width, L)
            reports.append((lv.name, rep))
            payload["reports"][lv.name] = rep.to_dict()
        if args.baseline:
            comp = cost.compare_baseline(text_len=L)
            comps = comp.pop("comparisons")
            for c in comps:
                reports.append((f"{c.level}/baseline", c.baseline))
            comparison = comp
            payload["comparison"] = comp
    payload["convention"] = cost.CONVENTION
    payload["published_reference"] = cost.PUBLISHED_REFERENCE
    for name, rep in reports:
        tables.append(f"[{name}]\n" + cost.format_table(rep))

    if args.json:
        _write_text(args.json, _dump_json(payload))
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["report", "layer", "params", "macs", "flops", "nonlinear"])
        for name, rep in reports:
            for r in rep.rows:
                w.writerow([name, r.name, r.param_count, r.mac_count, r.flops, r.nonlinear_count])
            w.writerow([name, "total", rep.total_params, rep.total_macs, rep.total_flops,
                        rep.total_nonlinear])
        _write_text(args.csv, buf.getvalue())
    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        for name, rep in reports:
            plotting.plot_cost_breakdown(rep, fig_dir / f"cost_{name.replace('/', '_')}.png")
        if comparison is not None:
            plotting.plot_cost_comparison(comparison, fig_dir / "cost_comparison.png")
    if not (args.json == "-" or args.csv == "-"):
        if sys.stdout.isatty():
            print("\n\n".join(tables))
        else:
            sys.stdout.write(_dump_json(payload))
    return EXIT_OK


def cmd_init(args, rc: RunConfig) -> int:
    cfg = rc.cage_config(gradcheck.DEFAULT_CONFIG)
    params = fusion.init_params(cfg, rc.seed if args.seed is None else args.seed,
                                identity_init=not args.random)
    path = checkpoint.save_checkpoint(args.out, params, cfg)
    print(path)
    return EXIT_OK


def cmd_demo_forward(args, rc: RunConfig) -> int:
    params, cfg = checkpoint.load_checkpoint(args.checkpoint)
    x = tensor.load(args.image).astype(np.float64)
    t = tensor.load(args.text).astype(np.float64)
    if args.channels_last:
        x = tensor.to_channels_first(x)
    out, acts = fusion.forward(x, t, params, cfg, mode=args.mode, update_running_stats=False)
    tensor.save(args.out, out.astype(np.float32) if args.f32 else out)
    stats = {"output_shape": list(out.shape), "mode": args.mode,
             "activations": acts.statistics()}
    _write_text(args.stats, _dump_json(stats))
    return EXIT_OK


def cmd_dedup(args, rc: RunConfig) -> int:
    manifest = labels.DatasetManifest.load(args.manifest)
    emb = labels.read_embeddings(args.embeddings)
    tau = _pick(args.tau, None, rc.tau)
    out, drops = labels.dedup_manifest(manifest, emb, tau)
    if args.out:
        _write_text(args.out, out.dumps())
    if args.drop_log:
        labels.write_jsonl(args.drop_log, [d.to_dict() for d in drops])
    summary = {"tau": tau, "kept": [im.id for im in out.images],
               "dropped": [d.to_dict() for d in drops]}
    sys.stdout.write(_dump_json(summary))
    return EXIT_OK


def cmd_convert(args, rc: RunConfig) -> int:
    manifest = labels.DatasetManifest.load(args.manifest)
    out = labels.normalize_manifest(manifest)
    _write_text(args.out, out.dumps())
    return EXIT_OK


def _load_jobs(path) -> list[labels.ReclassJob]:
    return [labels.ReclassJob.from_dict(d) for d in json.loads(Path(path).read_text())]


def cmd_reclass(args, rc: RunConfig) -> int:
    if args.action == "plan":
        manifest = labels.DatasetManifest.load(args.manifest)
        amb = args.ambiguous.split(",") if args.ambiguous else manifest.ambiguous_labels
        jobs = labels.plan_reclassification(manifest, amb, _pick(args.margin, None, rc.margin))
        _write_text(args.out, _dump_json([j.to_dict() for j in jobs]))
        return EXIT_OK
    if args.action == "classify":
        jobs = _load_jobs(args.jobs)
        if args.mock:
            client = labels.MockClassifier(json.loads(Path(args.mock).read_text()))
        else:
            client = labels.HttpClassifier()
        cands = args.candidates.split(",") if args.candidates else []
        _write_text(args.out, _dump_json(labels.run_classifier(jobs, client, cands)))
        return EXIT_OK
    manifest = labels.DatasetManifest.load(args.manifest)
    jobs = _load_jobs(args.jobs)
    responses = json.loads(Path(args.responses).read_text())
    allowed = None
    if args.allowed:
        allowed = [ln.strip() for ln in Path(args.allowed).read_text().splitlines() if ln.strip()]
    out, new_jobs, rejections = labels.apply_reclassification(manifest, jobs, responses, allowed)
    _write_text(args.out, out.dumps())
    if args.jobs_out:
        _write_text(args.jobs_out, _dump_json([j.to_dict() for j in new_jobs]))
    if args.rejections:
        labels.write_jsonl(args.rejections, [r.to_dict() for r in rejections])
    sys.stdout.write(_dump_json({"resolved": sum(j.status == "resolved" for j in new_jobs),
                                 "rejected": len(rejections)}))
    return EXIT_OK


def cmd_caption(args, rc: RunConfig) -> int:
    manifest = labels.DatasetManifest.load(args.manifest)
    grid = labels.DEFAULT_GRID
    if args.grid:
        g = json.loads(Path(args.grid).read_text())
        grid = labels.Grid(tuple(tuple(row) for row in g["names"]), tuple(g["cuts"]))
    prompts = labels.caption_prompts(manifest, grid)
    out_dir = Path(args.out)
    for image_id, text in prompts.items():
        _write_text(str(out_dir / f"{image_id}.txt"), text)
    sys.stdout.write(_dump_json({"written": sorted(prompts)}))
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    dets = evaluation.read_jsonl(args.dets, "det")
    gts = evaluation.read_jsonl(args.gts, "gt")
    cats = None
    if args.categories:
        cats = [ln.strip() for ln in Path(args.categories).read_text().splitlines() if ln.strip()]
    res = evaluation.evaluate(dets, gts, _pick(args.score_floor, None, rc.score_floor),
                              categories=cats, max_dets=args.max_dets)
    payload = res.to_dict()
    if args.json:
        _write_text(args.json, _dump_json(payload))
    if args.figures:
        from . import plotting

        plotting.plot_pr_curves(res, Path(args.figures) / "pr_curves.png")
    print(f"AP50={round(res.ap50, 4)} mAP={round(res.map, 4)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cage", description=__doc__.strip().splitlines()[0])
    p.add_argument("--config", help="JSON run config (keys: %s)"
                   % ", ".join(f.name for f in fields(RunConfig)))
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full block")
    g.add_argument("--tol", type=float, default=None, help="relative tolerance (1e-4)")
    g.add_argument("--seeds", type=int, nargs="+", help="seeds to check (default: --seed)")
    g.add_argument("--mode", choices=("train", "eval"), default="train")
    g.add_argument("--batch", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--tokens", type=int)
    g.add_argument("--json", action="store_true", help="machine-readable output")
    g.add_argument("--sabotage", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("audit", help="drop-in shape contract at the three neck levels")
    a.add_argument("--text-len", type=int, default=10)
    a.add_argument("--batch", type=int, default=1)
    a.add_argument("--expect", action="append", metavar="LEVEL=C",
                   help="channel count the downstream head expects at LEVEL")
    a.add_argument("--no-forward", action="store_true",
                   help="derive shapes from the config instead of running the block")
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("cost", help="parameter / FLOP report")
    c.add_argument("--height", type=int)
    c.add_argument("--width", type=int)
    c.add_argument("--tokens", type=int, help="text tokens L (default 10)")
    c.add_argument("--batch", type=int)
    c.add_argument("--baseline", action="store_true", help="add reference-baseline rows")
    c.add_argument("--json", metavar="PATH", help="write the JSON report ('-' = stdout)")
    c.add_argument("--csv", metavar="PATH", help="write per-layer rows as CSV ('-' = stdout)")
    c.add_argument("--figures", metavar="DIR", help="render PNG figures into DIR")
    c.set_defaults(func=cmd_cost)

    i = sub.add_parser("init", help="write a freshly initialized checkpoint")
    i.add_argument("--out", required=True, help="checkpoint directory")
    i.add_argument("--random", action="store_true",
                   help="randomize BN gain and FiLM output instead of zero-init")
    i.set_defaults(func=cmd_init)

    d = sub.add_parser("demo-forward", help="run one forward pass from a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True, help="CAGT tensor (B,C,H,W)")
    d.add_argument("--text", required=True, help="CAGT tensor (B,L,D)")
    d.add_argument("--out", required=True, help="CAGT output tensor")
    d.add_argument("--stats", required=True, help="JSON activation statistics ('-' = stdout)")
    d.add_argument("--mode", choices=("train", "eval"), default="eval")
    d.add_argument("--channels-last", action="store_true", help="image is (B,H,W,C)")
    d.add_argument("--f32", action="store_true", help="store the output as float32")
    d.set_defaults(func=cmd_demo_forward)

    dd = sub.add_parser("dedup", help="drop redundant frames")
    dd.add_argument("--manifest", required=True)
    dd.add_argument("--embeddings", required=True, help="JSONL {frame_id, dim, values}")
    dd.add_argument("--tau", type=float, default=None, help="similarity threshold (0.95)")
    dd.add_argument("--out", help="deduplicated manifest")
    dd.add_argument("--drop-log", help="append drop records to this JSONL file")
    dd.set_defaults(func=cmd_dedup)

    cv = sub.add_parser("convert", help="convert all geometries to axis-aligned boxes")
    cv.add_argument("--manifest", required=True)
    cv.add_argument("--out", required=True)
    cv.set_defaults(func=cmd_convert)

    r = sub.add_parser("reclass", help="re-classification of ambiguous labels")
    rs = r.add_subparsers(dest="action", required=True)
    rp = rs.add_parser("plan")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--ambiguous", help="comma-separated labels (default: manifest list)")
    rp.add_argument("--margin", type=float, default=None)
    rp.add_argument("--out", required=True, help="jobs JSON")
    rc_ = rs.add_parser("classify", help="query a classifier for planned jobs")
    rc_.add_argument("--jobs", required=True)
    rc_.add_argument("--out", required=True, help="responses JSON {job_id: label}")
    rc_.add_argument("--mock", help="JSON lookup for the offline mock classifier")
    rc_.add_argument("--candidates", help="comma-separated candidate labels")
    ra = rs.add_parser("apply")
    ra.add_argument("--manifest", required=True)
    ra.add_argument("--jobs", required=True)
    ra.add_argument("--responses", required=True)
    ra.add_argument("--allowed", help="closed vocabulary file, one label per line")
    ra.add_argument("--out", required=True)
    ra.add_argument("--jobs-out")
    ra.add_argument("--rejections", help="append rejections to this JSONL file")
    r.set_defaults(func=cmd_reclass)

    cp = sub.add_parser("caption", help="build caption prompts")
    cp.add_argument("--manifest", required=True)
    cp.add_argument("--out", required=True, help="output directory")
    cp.add_argument("--grid", help="JSON {names: 3x3, cuts: [a, b]}")
    cp.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="AP50 / mAP")
    e.add_argument("--dets", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--score-floor", type=float, default=None)
    e.add_argument("--categories", help="prompt class list, one per line")
    e.add_argument("--max-dets", type=int, default=None)
    e.add_argument("--json", metavar="PATH")
    e.add_argument("--figures", metavar="DIR")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = RunConfig.load(args.config)
        if args.seed is not None:
            rc.seed = args.seed
        return args.func(args, rc)
    except (UsageError, ConfigError, labels.ManifestError, tensor.TensorFormatError,
            json.JSONDecodeError, FileNotFoundError, KeyError, ValueError, TypeError) as exc:
        print(f"cage {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
