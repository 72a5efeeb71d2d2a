"""Batch operator surface for the toolkit.

Subcommands cover dataset synthesis, scoring, codec round-trip checking,
gradient verification, toy training, synthetic-corpus creation, and a
JSON-over-stdio ``api`` mode used by foreign-language bindings. Every
command follows the same contract: exit 0 on success, 1 on validation
failure, 2 on internal error; diagnostics go to stderr; files are written
only to explicitly declared paths; all randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import random
import sys

import numpy as np

from . import codec, metrics, referents, scenes, synth
from .autodiff import NumericError, grad_check
from .codec import ParseError, QuantBox
from .geometry import Box3

DEFAULT_SEED = 0


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.exit_with(message))

    @staticmethod
    def exit_with(message) -> int:
        print(f"error: {message}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenegrid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize an instruction dataset")
    p.add_argument("--scenes", required=True, help="scene records JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument(
        "--scale",
        type=float,
        default=0.01,
        help="fraction of the full per-task sample counts",
    )
    p.add_argument(
        "--tasks",
        nargs="+",
        choices=list(synth.TASKS),
        default=list(synth.TASKS),
    )

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth samples JSONL")
    p.add_argument("--pred", required=True, help="predictions JSONL")
    p.add_argument(
        "--iou",
        type=float,
        action="append",
        default=None,
        help="IoU threshold (repeatable; default 0.25 and 0.5)",
    )
    p.add_argument("--report", required=True, help="report output path")

    p = sub.add_parser("codec", help="round-trip check a samples file")
    p.add_argument("--samples", required=True, help="samples JSONL")

    p = sub.add_parser("gradcheck", help="finite-difference check the scheme")
    p.add_argument("--m", type=int, default=8, help="referent count")
    p.add_argument("--n", type=int, default=32, help="scene token count")
    p.add_argument("--d", type=int, default=16, help="feature width")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("train-toy", help="overfit the scheme on one scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", help="scene records JSONL (default: built-in room)")
    p.add_argument("--scene-id", help="scene to train on when --scenes is given")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("make-scenes", help="write a synthetic scene corpus")
    p.add_argument("--out", required=True, help="scenes JSONL output path")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--min-objects", type=int, default=8)
    p.add_argument("--max-objects", type=int, default=12)

    sub.add_parser(
        "api", help="serve one JSON request from stdin (bindings transport)"
    )
    return parser


# --------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth(args) -> int:
    scene_list = scenes.load_scenes(args.scenes)
    plan = synth.DatasetPlan.scaled(args.scale, tasks=tuple(args.tasks))
    result = synth.generate_dataset(scene_list, plan, seed=args.seed)
    synth.write_dataset(result, args.out)
    counts = result.manifest["counts"]
    print(
        f"wrote {args.out}: train={counts['train']} val={counts['val']} "
        f"hash={result.manifest['sha256']['combined'][:16]}",
        file=sys.stderr,
    )
    return 0


def _cmd_eval(args) -> int:
    gt = synth.load_samples(args.gt)
    preds = metrics.load_predictions(args.pred)
    thresholds = tuple(args.iou) if args.iou else (0.25, 0.5)
    report = metrics.score_samples(gt, preds, thresholds)
    metrics.write_report(report, args.report)
    print(report.as_text(), end="", file=sys.stderr)
    return 0


def _cmd_codec(args) -> int:
    samples = synth.load_samples(args.samples)
    if not samples:
        print("error: no samples to check", file=sys.stderr)
        return 1
    violations = 0
    for sample in samples:
        try:
            synth.verify_sample(sample)
            _check_reemit(sample)
        except (ValueError, ParseError) as exc:
            violations += 1
            print(f"violation: {exc}", file=sys.stderr)
    print(
        f"checked {len(samples)} samples, {violations} violations", file=sys.stderr
    )
    return 0 if violations == 0 else 1


def _check_reemit(sample: synth.InstructionSample):
    """Emitting the parsed items must reproduce the exact token substrings."""
    payload = codec.parse_answer(sample.answer)
    for item in payload.items:
        if isinstance(item, codec.LocItem):
            rendered = codec.emit_loc(item.box)
        elif isinstance(item, codec.GapItem):
            rendered = codec.emit_gap(item.value)
        else:
            rendered = codec.emit_center(item.center)
        at = sample.answer[item.position : item.position + len(rendered)]
        if at != rendered:
            raise ValueError(
                f"{sample.sample_id}: re-emit mismatch at {item.position}: "
                f"{at!r} != {rendered!r}"
            )


def _gradcheck_setup(m: int, n: int, d: int, seed: int):
    """A small random scene plus a model sized for finite differencing."""
    room = scenes.make_synthetic_scene("gradcheck", 5, random.Random(seed))
    cloud = scenes.scene_point_cloud(room, points_per_object=max(16, n // 4), seed=seed)
    cfg = referents.SchemeConfig(
        n_points=n, feat_dim=d, n_referents=m, graph_k=min(3, m - 1)
    )
    encoded = referents.encode_scene_stub(cloud, cfg)
    model = referents.ReferentModel(cfg, seed=seed)
    # break the zero init of the offset heads so every block carries signal
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith("w2") or name.endswith("b2") or name.endswith("b1"):
            p.values += rng.normal(0.0, 0.05, size=p.values.shape)
    boxes = [o.box for o in room.objects]
    vr = model.forward(encoded)
    gt = referents.assign_gt_centroids(vr.positions.values, boxes)
    return model, encoded, gt


def _cmd_gradcheck(args) -> int:
    model, encoded, gt = _gradcheck_setup(args.m, args.n, args.d, args.seed)

    def objective():
        total, _, _, _ = referents.spatial_objective(
            model, encoded, gt, with_prompt_probe=True
        )
        return total

    report = grad_check(objective, model.params, tol=args.tol)
    by_block: dict[str, float] = {}
    for name, err in report.per_param.items():
        block = referents.param_block(name)
        by_block[block] = max(by_block.get(block, 0.0), err)
    for block in sorted(by_block):
        print(f"{block}: max_rel_error={by_block[block]:.3e}")
    print(
        f"overall: max_rel_error={report.max_rel_error:.3e} tol={args.tol:g} "
        f"-> {'PASS' if report.passed else 'FAIL'}"
    )
    return 0 if report.passed else 1


def _cmd_train_toy(args) -> int:
    import os

    if args.scenes:
        corpus = scenes.load_scenes(args.scenes)
        if args.scene_id:
            matches = [s for s in corpus if s.scene_id == args.scene_id]
            if not matches:
                print(f"error: scene {args.scene_id!r} not found", file=sys.stderr)
                return 1
            scene = matches[0]
        else:
            scene = corpus[0]
    else:
        scene = scenes.make_synthetic_scene(
            "train_room", 5, random.Random(args.seed), room_size=(6.0, 6.0, 3.0)
        )

    result = referents.train_toy(
        scene, steps=args.steps, lr=args.lr, seed=args.seed
    )
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, "trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:
        for step in result.trace:
            fh.write(
                json.dumps(
                    {
                        "step": step.step,
                        "l_center": step.l_center,
                        "l_psc": step.l_psc,
                        "total": step.total,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    referents.save_checkpoint(result.model, os.path.join(args.out, "checkpoint.txt"))
    first, last = result.trace[0], result.trace[-1]
    print(
        f"trained {len(result.trace)} steps: l_center {first.l_center:.4f} -> "
        f"{last.l_center:.4f}, l_psc {first.l_psc:.4f} -> {last.l_psc:.4f}",
        file=sys.stderr,
    )
    return 0


def _cmd_make_scenes(args) -> int:
    corpus = scenes.make_synthetic_corpus(
        args.count,
        seed=args.seed,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
    )
    scenes.save_scenes(corpus, args.out)
    print(f"wrote {len(corpus)} scenes to {args.out}", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# JSON-over-stdio API (bindings transport)


def _box_from_list(values) -> Box3:
    v = [float(x) for x in values]
    if len(v) != 6:
        raise ValueError(f"box needs 6 numbers, got {len(v)}")
    return Box3(center=v[:3], extent=v[3:])


def _qbox_from_list(values) -> QuantBox:
    v = [int(x) for x in values]
    if len(v) != 6:
        raise ValueError(f"box needs 6 integers, got {len(v)}")
    return QuantBox(center=tuple(v[:3]), extent=tuple(v[3:]))


def _payload_to_plain(payload: codec.AnswerPayload) -> dict:
    items = []
    for item in payload.items:
        if isinstance(item, codec.LocItem):
            items.append(
                {"kind": "loc", "box": item.box.as_list(), "position": item.position}
            )
        elif isinstance(item, codec.GapItem):
            items.append(
                {"kind": "gap", "value": item.value, "position": item.position}
            )
        else:
            items.append(
                {
                    "kind": "center",
                    "center": list(item.center),
                    "position": item.position,
                }
            )
    return {"items": items, "residual": payload.residual}


def _api_mare_side(entry):
    if entry is None:
        return None
    return ([_box_from_list(b) for b in entry["boxes"]], [float(g) for g in entry["gaps"]])


def _handle_api(request: dict) -> dict:
    op = request.get("op")
    args = request.get("args", {})
    if op == "fit_transform":
        record = scenes._scene_from_dict(args["scene"])
        t = codec.fit_transform(record)
        return {"mins": list(t.mins), "maxs": list(t.maxs)}
    if op == "emit_loc":
        return {"text": codec.emit_loc(_qbox_from_list(args["box"]))}
    if op == "parse_loc":
        return {"box": codec.parse_loc(args["text"]).as_list()}
    if op == "emit_gap":
        return {"text": codec.emit_gap(int(args["value"]))}
    if op == "parse_gap":
        return {"value": codec.parse_gap(args["text"])}
    if op == "parse_answer":
        return _payload_to_plain(codec.parse_answer(args["text"]))
    if op == "acc_at_iou":
        preds = [None if p is None else _box_from_list(p) for p in args["preds"]]
        gts = [_box_from_list(g) for g in args["gts"]]
        return {"value": metrics.acc_at_iou(preds, gts, float(args["k"]))}
    if op == "f1_at_iou":
        pred_sets = [[_box_from_list(b) for b in s] for s in args["pred_sets"]]
        gt_sets = [[_box_from_list(b) for b in s] for s in args["gt_sets"]]
        return {"value": metrics.f1_at_iou(pred_sets, gt_sets, float(args["k"]))}
    if op == "mare_at_iou":
        preds = [_api_mare_side(p) for p in args["preds"]]
        gts = [_api_mare_side(g) for g in args["gts"]]
        rep = metrics.mare_at_iou(preds, gts, float(args["k"]))
        return {
            "axis_mare": list(rep.axis_mare),
            "gate_rate": rep.gate_rate,
            "n_total": rep.n_total,
            "n_qualified": rep.n_qualified,
        }
    if op == "editing_acc":
        task = args["task"]
        gts = [_box_from_list(g) for g in args["gts"]]
        if task == "movement":
            preds = [None if p is None else _box_from_list(p) for p in args["preds"]]
        else:
            preds = [None if p is None else [float(v) for v in p] for p in args["preds"]]
        return {"value": metrics.editing_acc(preds, gts, task, float(args["k"]))}
    if op == "generate_dataset":
        scene_list = scenes.load_scenes(args["scenes_path"])
        if "plan" in args:
            plan = synth.DatasetPlan(
                train_counts=args["plan"]["train_counts"],
                val_counts=args["plan"]["val_counts"],
                val_scene_fraction=args["plan"].get("val_scene_fraction", 0.1),
            )
        else:
            plan = synth.DatasetPlan.scaled(float(args.get("scale", 0.01)))
        result = synth.generate_dataset(scene_list, plan, seed=int(args.get("seed", 0)))
        if "out_dir" in args:
            synth.write_dataset(result, args["out_dir"])
        return {"manifest": result.manifest}
    raise ValueError(f"unknown api op {op!r}")


_ERROR_CODES = {
    ParseError: "parse-error",
    NumericError: "numeric-error",
    ValueError: "invalid-argument",
    KeyError: "invalid-argument",
}


def _cmd_api(_args) -> int:
    raw = sys.stdin.read()
    try:
        request = json.loads(raw)
        result = _handle_api(request)
        response = {"ok": True, "result": result}
    except Exception as exc:  # errors travel in-band to the binding
        code = "internal"
        for etype, name in _ERROR_CODES.items():
            if isinstance(exc, etype):
                code = name
                break
        error = {"code": code, "message": str(exc)}
        if isinstance(exc, ParseError):
            error["position"] = exc.position
        response = {"ok": False, "error": error}
    json.dump(response, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "codec": _cmd_codec,
    "gradcheck": _cmd_gradcheck,
    "train-toy": _cmd_train_toy,
    "make-scenes": _cmd_make_scenes,
    "api": _cmd_api,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
