"""Command-line entry points for the whole pipeline.

Commands: synth, train, eval, cluster, rollout, cascade, serve. An
optional config file supplies per-command defaults as key=value lines
under a [command] section; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import cascade as cascade_mod
from . import data as D
from . import dec
from . import metrics as M
from . import training as tr
from . import vit


def _build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="femurcad",
                                     description="Femur-fracture CAD pipeline")
    parser.add_argument("--config", help="INI-style config file with [command] sections")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    commands["synth"] = p

    p = sub.add_parser("train", help="train the classifier")
    p.add_argument("--data", required=True, help="dataset directory with manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--preset", default="tiny", choices=sorted(vit.PRESETS))
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--strategy", default="oversample", choices=tr.BALANCE_STRATEGIES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    commands["train"] = p

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    commands["eval"] = p

    p = sub.add_parser("cluster", help="cluster encoder features")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--features", help="reuse an existing feature file instead of extracting")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pretrain-epochs", type=int, default=200)
    p.add_argument("--latent", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    commands["cluster"] = p

    p = sub.add_parser("rollout", help="write attention heatmaps for samples")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ids", help="comma-separated sample ids (default: first --count)")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    commands["rollout"] = p

    p = sub.add_parser("cascade", help="train and evaluate the hierarchical baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--preset", default="tiny", choices=sorted(vit.PRESETS))
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    commands["cascade"] = p

    p = sub.add_parser("serve", help="run the inference + reader-study service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", default="study-sessions")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--case-count", type=int, default=150)
    p.add_argument("--washout-seconds", type=float, default=0.0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    commands["serve"] = p

    return parser, commands


def _apply_config_defaults(argv, commands: dict) -> None:
    """Seed subparser defaults from the [command] section of --config."""
    if "--config" not in argv:
        return
    config_path = argv[argv.index("--config") + 1]
    command = next((a for a in argv if a in commands), None)
    if command is None:
        return
    ini = configparser.ConfigParser()
    ini.read(config_path)
    if command not in ini:
        return
    sub = commands[command]
    overrides = {}
    for action in sub._actions:
        key = action.dest.replace("_", "-")
        if key in ini[command]:
            raw = ini[command][key]
            overrides[action.dest] = action.type(raw) if action.type else raw
    sub.set_defaults(**overrides)


def _load_dataset(data_dir: str, image_size: int) -> D.ArrayDataset:
    manifest = D.load_manifest(Path(data_dir) / "manifest.jsonl")
    return D.build_array_dataset(manifest, image_size, root=Path(data_dir))


def cmd_synth(args) -> int:
    manifest, _ = D.synth_generate(args.per_class, seed=args.seed, out_dir=args.out)
    hist = {k.value: v for k, v in D.class_histogram(manifest).items()}
    print(f"wrote {len(manifest)} samples to {args.out} {hist}")
    return 0


def cmd_train(args) -> int:
    config = vit.ViTConfig.preset(args.preset)
    dataset = _load_dataset(args.data, config.image_size)
    plan = tr.make_splits(dataset.pairs(), seed=args.split_seed)
    model = vit.ViTModel(config, seed=args.seed)
    train_cfg = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               lr=args.lr, strategy=args.strategy, seed=args.seed,
                               log_path=args.log)
    result = tr.train(model, dataset, plan, train_cfg)
    vit.save_checkpoint(model, args.out)
    best = result.best_val_loss
    print(f"trained {args.preset} for {result.stopped_epoch} epochs "
          f"(best epoch {result.best_epoch}, val loss {best:.4f}) -> {args.out}")
    return 0


def _test_eval(model, dataset, plan):
    ids = plan.test_ids
    truth = np.array([dataset.label_for(sid) for sid in ids])
    preds = np.empty(len(ids), dtype=np.int64)
    import femurcad.tensor as T

    with T.no_grad():
        for start in range(0, len(ids), 64):
            chunk = ids[start:start + 64]
            images = np.stack([dataset.image_for(sid) for sid in chunk])
            logits, _ = vit.forward_batch(model, images, mode="infer", want_trace=False)
            preds[start:start + len(chunk)] = logits.data.argmax(axis=1)
    return truth, preds


def cmd_eval(args) -> int:
    model = vit.load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, model.config.image_size)
    plan = tr.make_splits(dataset.pairs(), seed=args.split_seed)
    truth, preds = _test_eval(model, dataset, plan)
    report = M.report_with_intervals(truth, preds, num_classes=model.config.num_classes,
                                     class_names=D.LABEL_NAMES,
                                     resamples=args.resamples, seed=args.seed)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"test accuracy {report.accuracy:.4f} macro-F1 {report.macro_f1:.4f} -> {args.out}")
    return 0


def cmd_cluster(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = vit.load_checkpoint(args.ckpt) if args.ckpt else None
    image_size = model.config.image_size if model else 64
    dataset = _load_dataset(args.data, image_size)

    if args.features:
        features = dec.load_features(args.features)
    else:
        if model is None:
            raise SystemExit("cluster needs --ckpt or --features")
        features = vit.extract_features_batch(model, dataset.images)
        dec.save_features(out_dir / "features.f32", features)

    ae, history = dec.pretrain_autoencoder(features, hidden=(64, 32), latent=args.latent,
                                           epochs=args.pretrain_epochs, seed=args.seed)
    labels = dataset.labels if len(dataset.labels) == len(features) else None
    result = dec.dec_train(ae, features, labels=labels,
                           config=dec.DecConfig(seed=args.seed))
    dec.export_assignments(out_dir / "assignments.csv", dataset.ids, result.q)
    summary = {
        "pretrain_final_error": history.final_error,
        "converged": result.converged,
        "init": result.init_metrics,
        "history": result.history,
    }
    (out_dir / "clustering.json").write_text(json.dumps(summary, indent=2) + "\n")
    final = result.history[-1] if result.history else {}
    print(f"clustering done (accuracy {final.get('accuracy', float('nan')):.4f}, "
          f"nmi {final.get('nmi', float('nan')):.4f}) -> {out_dir}")
    return 0


def cmd_rollout(args) -> int:
    model = vit.load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, model.config.image_size)
    ids = args.ids.split(",") if args.ids else dataset.ids[:args.count]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        image = dataset.image_for(sid)
        _, trace = vit.forward(model, image, mode="infer")
        heatmap = vit.normalize_heatmap(vit.attention_rollout(trace))
        upsampled = D.bilinear_resize(heatmap, model.config.image_size,
                                      model.config.image_size)
        D.save_image(out_dir / f"{sid}_heatmap.png", upsampled)
        overlay = np.clip(0.6 * image[0] + 0.4 * upsampled, 0, 1)
        D.save_image(out_dir / f"{sid}_overlay.png", overlay)
    print(f"wrote {2 * len(ids)} heatmap images to {out_dir}")
    return 0


def cmd_cascade(args) -> int:
    backbone = vit.ViTConfig.preset(args.preset)
    dataset = _load_dataset(args.data, backbone.image_size)
    plan = tr.make_splits(dataset.pairs(), seed=args.split_seed)
    config = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            lr=args.lr, seed=args.seed)
    spec, logs = cascade_mod.train_cascade(dataset, plan, config, backbone=backbone,
                                           seed=args.seed)
    out_dir = Path(args.out_dir)
    cascade_mod.save_cascade(spec, out_dir)

    test_ids = plan.test_ids
    truth = np.array([dataset.label_for(sid) for sid in test_ids])
    preds = cascade_mod.evaluate_cascade(spec, dataset, test_ids)
    report = M.report_with_intervals(truth, preds, num_classes=7,
                                     class_names=D.LABEL_NAMES, seed=args.seed)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / "train_logs.json").write_text(json.dumps(logs, indent=2) + "\n")
    print(f"cascade accuracy {report.accuracy:.4f} -> {out_dir}")
    return 0


def build_service(args):
    """Assemble the FastAPI app the serve command runs (import-safe for tests)."""
    from . import service as svc

    model = vit.load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data, model.config.image_size)
    plan = tr.make_splits(dataset.pairs(), seed=args.split_seed)
    truth = {sid: D.LABEL_NAMES[dataset.label_for(sid)] for sid in dataset.ids}
    config = svc.ServiceConfig(case_count=args.case_count,
                               washout_seconds=args.washout_seconds, seed=args.seed)
    return svc.create_app(model=model, dataset=dataset, truth=truth,
                          case_pool=plan.test_ids, store_dir=args.store, config=config)


def cmd_serve(args) -> int:
    import uvicorn

    app = build_service(args)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
    "rollout": cmd_rollout,
    "cascade": cmd_cascade,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = _build_parser()
    _apply_config_defaults(argv, commands)
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:  # runtime failure -> exit 1 with diagnostic
        print(f"femurcad {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
