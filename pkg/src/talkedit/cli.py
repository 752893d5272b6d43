"""Operator command line: training, evaluation, serving, and a text REPL.

Artifacts live under $TALKEDIT_HOME (default ./artifacts) in
{component}/{name}-{seed}/ directories, each holding a checkpoint plus a
diff-friendly metadata.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dialog as dlg
from . import evaluation as ev
from . import field as fld
from . import language as lang
from . import predictor as pred
from .backend import ATTRIBUTE_NAMES, ToyWorld, ToyWorldConfig, make_backend
from .predictor import TrainingGateError


def artifact_root(args) -> Path:
    return Path(os.environ.get("TALKEDIT_HOME", args.home or "artifacts"))


def load_backend(args) -> ToyWorld:
    if args.backend_config:
        return make_backend(ToyWorldConfig.from_json(Path(args.backend_config).read_text()))
    return ToyWorld(ToyWorldConfig(seed=args.seed))


def _artifact_dir(root: Path, component: str, name: str, seed: int) -> Path:
    out = root / component / f"{name}-{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out_dir: Path, meta: dict) -> None:
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=1))


def _field_config(args) -> fld.FieldConfig:
    return fld.FieldConfig(
        alpha=args.alpha,
        max_steps_per_class=args.max_steps,
        lambda_pred=args.lambda_pred,
        lambda_id=args.lambda_id,
        lambda_disc=args.lambda_disc,
    )


def cmd_train(args) -> int:
    root = artifact_root(args)
    backend = load_backend(args)
    if args.component in ("predictor", "eval-predictor"):
        train = pred.train_predictor if args.component == "predictor" else pred.train_eval_predictor
        try:
            model = train(backend, args.n_samples, args.seed, epochs=args.epochs)
        except TrainingGateError as exc:
            print(f"training gate failed: {exc}", file=sys.stderr)
            return 1
        out = _artifact_dir(root, args.component, "toy", args.seed)
        pred.save_predictor(model, out / "checkpoint.pt")
        _write_meta(out, model.meta)
        print(out / "checkpoint.pt")
        return 0
    if args.component == "field":
        if args.attribute not in ATTRIBUTE_NAMES:
            print(f"unknown attribute {args.attribute!r}; pick one of {ATTRIBUTE_NAMES}", file=sys.stderr)
            return 2
        predictor = pred.load_predictor(root / "predictor" / f"toy-{args.seed}" / "checkpoint.pt")
        config = _field_config(args)
        model = fld.train_field(
            backend, predictor, ATTRIBUTE_NAMES.index(args.attribute),
            config=config, n_iters=args.iters, seed=args.seed,
        )
        out = _artifact_dir(root, "field", args.attribute, args.seed)
        fld.save_field(model, out / "checkpoint.pt")
        _write_meta(out, {k: v for k, v in model.meta.items() if k != "loss_curve"})
        print(out / "checkpoint.pt")
        converged = model.meta["final_loss"] < 0.25 * model.meta["initial_loss"]
        if not converged:
            print(
                f"training gate failed: final loss {model.meta['final_loss']:.3f} is not "
                f"< 25% of initial {model.meta['initial_loss']:.3f}",
                file=sys.stderr,
            )
            return 1
        return 0
    if args.component == "encoder":
        corpus = lang.generate_corpus(lang.load_templates(args.templates), args.seed, args.corpus_size)
        try:
            model = lang.train_encoder(corpus, args.seed, epochs=args.epochs)
        except TrainingGateError as exc:
            print(f"training gate failed: {exc}", file=sys.stderr)
            return 1
        out = _artifact_dir(root, "encoder", "lstm", args.seed)
        lang.save_encoder(model, out / "checkpoint.pt")
        _write_meta(out, {k: v for k, v in model.meta.items() if k != "history"})
        (out / "corpus.jsonl").write_text(lang.corpus_to_jsonl(corpus))
        print(out / "checkpoint.pt")
        return 0
    print(f"unknown component {args.component!r}", file=sys.stderr)
    return 2


def _load_models(args, root: Path, need_encoder=True) -> dlg.DialogModels:
    backend = load_backend(args)
    predictor = pred.load_predictor(root / "predictor" / f"toy-{args.seed}" / "checkpoint.pt")
    eval_predictor = pred.load_predictor(root / "eval-predictor" / f"toy-{args.seed}" / "checkpoint.pt")
    fields = {}
    for i, name in enumerate(ATTRIBUTE_NAMES):
        path = root / "field" / f"{name}-{args.seed}" / "checkpoint.pt"
        if path.exists():
            fields[i] = fld.load_field(path)
    encoder = None
    if need_encoder:
        encoder = lang.load_encoder(root / "encoder" / f"lstm-{args.seed}" / "checkpoint.pt")
    return dlg.DialogModels(
        backend=backend,
        fields=fields,
        step_predictor=predictor,
        degree_predictor=eval_predictor,
        encoder=encoder,
        config=_field_config(args),
    )


def cmd_eval(args) -> int:
    root = artifact_root(args)
    if args.n < 1:
        print("--n must be >= 1", file=sys.stderr)
        return 2
    try:
        models = _load_models(args, root, need_encoder=False)
    except FileNotFoundError as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return 2
    backend, predictor = models.backend, models.step_predictor
    eval_predictor = models.degree_predictor
    attr_index = ATTRIBUTE_NAMES.index(args.attribute)
    field_model = models.fields.get(attr_index)
    if field_model is None:
        print(f"missing field checkpoint for {args.attribute}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or artifact_root(args) / "reports")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.kind == "compare":
        direction = fld.linear_baseline_direction(backend, predictor, attr_index, seed=args.seed)
        normals = fld.multiboundary_baseline(backend, predictor, attr_index, seed=args.seed)
        reports = ev.compare_methods(
            backend, field_model,
            {"fixed_direction": ("fixed", direction), "multiboundary": ("multiboundary", normals)},
            predictor, eval_predictor, n=args.n, seed=args.seed, config=models.config,
        )
        (out_dir / f"compare-{args.attribute}.json").write_text(ev.reports_to_json(reports))
        table = ev.render_table(reports)
        (out_dir / f"compare-{args.attribute}.txt").write_text(table)
        print(table)
        print(out_dir / f"compare-{args.attribute}.json")
        return 0
    if args.kind == "curvature":
        starts = ev.comparison_start_latents(backend, attr_index, args.n, args.seed, class_change=3)
        trajectories = []
        for z in starts:
            cur = int(np.argmax(fld.attribute_logits(predictor, backend.generate(z))[attr_index]))
            t = fld.traverse(field_model, predictor, backend, z, min(5, cur + 3), models.config)
            if t.reached and abs(t.steps[-1].class_before - t.start_class) >= 2:
                trajectories.append(t)
        report = ev.curvature_analysis(trajectories)
        (out_dir / f"curvature-{args.attribute}.json").write_text(json.dumps(report.to_dict(), indent=1))
        print(json.dumps(report.to_dict(), indent=1))
        return 0
    print(f"unknown eval kind {args.kind!r}", file=sys.stderr)
    return 2


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    root = artifact_root(args)
    models = _load_models(args, root)
    app = create_app(models, args.data_dir or (root / "service-data"))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_repl(args) -> int:
    root = artifact_root(args)
    models = _load_models(args, root)
    state = dlg.new_session(models, seed=args.session_seed)
    transcript = []
    print(f"session started; degrees: {dict(zip(ATTRIBUTE_NAMES, state.degrees.tolist()))}")
    print("type your request (:save <path> writes the transcript, :quit ends)")
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text == ":quit":
            state.fsm = "end"
            print("bye")
            break
        if text.startswith(":save"):
            path = text.split(None, 1)[1] if " " in text else "transcript.jsonl"
            Path(path).write_text("\n".join(json.dumps(r) for r in transcript) + "\n")
            print(f"saved {path}")
            continue
        result = dlg.dialog_round(state, text, models)
        record = {
            "round": state.round_index,
            "user": text,
            "feedback": result.feedback.text,
            "category": result.feedback.category,
            "degrees": state.degrees.tolist(),
            "fsm": state.fsm,
        }
        transcript.append(record)
        print(f"[{result.feedback.category}] {result.feedback.text}")
        print(f"degrees: {dict(zip(ATTRIBUTE_NAMES, state.degrees.tolist()))}")
        if state.fsm == "end":
            break
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="talkedit",
        description="Dialog-driven fine-grained latent editing on the analytic toy world.",
    )
    parser.add_argument("--home", default=None, help="artifact root (or set TALKEDIT_HOME; default ./artifacts)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=7, help="world/training seed (default 7)")
        p.add_argument("--backend-config", default=None, help="backend config JSON path")
        p.add_argument("--alpha", type=float, default=1.0, help="traversal step size (default 1.0)")
        p.add_argument("--max-steps", type=int, default=100, help="step budget per class changed (default 100)")
        p.add_argument("--lambda-pred", type=float, default=1.0, help="predictor loss weight (default 1.0)")
        p.add_argument("--lambda-id", type=float, default=1.0, help="identity loss weight (default 1.0)")
        p.add_argument("--lambda-disc", type=float, default=0.0, help="discriminator loss weight (default 0.0)")

    t = sub.add_parser("train", help="train a component and write its checkpoint")
    t.add_argument("component", choices=["predictor", "eval-predictor", "field", "encoder"])
    t.add_argument("attribute", nargs="?", default=None, help="attribute name (field only)")
    t.add_argument("--n-samples", type=int, default=20000, help="predictor training samples (default 20000)")
    t.add_argument("--epochs", type=int, default=None, help="training epochs (component-specific default)")
    t.add_argument("--iters", type=int, default=12000, help="field training iterations (default 12000)")
    t.add_argument("--corpus-size", type=int, default=10000, help="encoder corpus size (default 10000)")
    t.add_argument("--templates", default=None, help="template JSON override path")
    common(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation harness and write reports")
    e.add_argument("kind", choices=["compare", "curvature"])
    e.add_argument("--attribute", default="bangs", choices=list(ATTRIBUTE_NAMES))
    e.add_argument("--n", type=int, default=100, help="number of start latents (default 100)")
    e.add_argument("--out", default=None, help="report output directory")
    common(e)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("serve", help="serve the session HTTP API")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8008, help="listen port (default 8008)")
    s.add_argument("--data-dir", default=None, help="session/image store directory")
    common(s)
    s.set_defaults(fn=cmd_serve)

    r = sub.add_parser("repl", help="text-only dialog loop on stdin/stdout")
    r.add_argument("--session-seed", type=int, default=None, help="initial latent seed")
    common(r)
    r.set_defaults(fn=cmd_repl)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train":
        if args.epochs is None:
            args.epochs = 14 if args.component in ("predictor", "eval-predictor") else 6
        if args.component == "field" and not args.attribute:
            print("field training needs an attribute name", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
