"""Command-line harness: data generation, training, sampling, evaluation,
mask inspection, and the paired ablation runs."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .codec import LATENT_CHANNELS, LatentCodec, nearest_resize
from .dataset import (DEFAULT_TASK_MIX, DatasetManifest, family_counts,
                      read_dataset, write_dataset)
from .flow import EDIT_IMAGE_SCALE, GuidanceConfig, euler_sample
from .model import (ModelConfig, VelocityModel, attention_mask_reference,
                    build_attention_mask, load_checkpoint, save_checkpoint)
from .ppm import write_ppm
from .blob import save_tensor
from .sequence import TaskRecord, assemble, validate_record
from .train import (StageConfig, TrainConfig, evaluate, evaluate_flow_loss,
                    format_eval, split_holdout, train_model, write_eval_csv)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="any2i",
        description="Desk-scale multimodal-conditioned rectified-flow image generator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", help="manifest JSON file (overrides the flags below)")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-size", type=int, default=8)
    p.add_argument("--mix", help='task mix as JSON, e.g. \'{"t2i": 1.0}\'')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="train config JSON (stages, dropout, ...)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-mode", choices=["hybrid", "causal"])
    p.add_argument("--weighted-loss", choices=["on", "off"])
    p.add_argument("--steps", type=int, help="override steps of the single stage")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample an image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--record", help="dataset record as DIR:INDEX")
    p.add_argument("--instruction", help="inline text-to-image instruction")
    p.add_argument("--latent-size", type=int, default=8, help="latent side for inline instructions")
    p.add_argument("--latent-out", help="also write the raw latent blob here")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--text-scale", type=float, default=2.5)
    p.add_argument("--image-scale", type=float, default=None,
                   help="default 1.6 (2.0 for editing records)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kv-cache", choices=["on", "off"], default="on")
    p.add_argument("--upscale", type=int, default=1, help="nearest-neighbor display upscale")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("--split", choices=["held", "train", "all"], default="held")
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--limit", type=int, default=0, help="cap the number of records (0 = all)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--text-scale", type=float, default=2.5)
    p.add_argument("--image-scale", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kv-cache", choices=["on", "off"], default="on")
    p.add_argument("--oracle-check", action="store_true",
                   help="score ground-truth targets instead of sampling")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-mask", help="print the layout and attention mask of a record")
    p.add_argument("--record", help="dataset record as DIR:INDEX")
    p.add_argument("--instruction", help="inline text-to-image instruction")
    p.add_argument("--latent-size", type=int, default=8)
    p.add_argument("--mask-mode", choices=["hybrid", "causal"], default="hybrid")
    p.add_argument("--drop-text", action="store_true")
    p.add_argument("--drop-images", action="store_true")
    p.add_argument("--max-len", type=int, default=160, help="refuse to render masks larger than this")
    p.set_defaults(func=cmd_inspect_mask)

    p = sub.add_parser("ablate", help="run a paired ablation comparison")
    p.add_argument("--which", choices=["weighted-loss", "mask"], required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--records", type=int, default=600)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--latent-size", type=int, default=8)
    p.add_argument("--eval-steps", type=int, default=50)
    p.add_argument("--eval-limit", type=int, default=48)
    p.set_defaults(func=cmd_ablate)

    args = parser.parse_args(argv)
    return args.func(args)


def _load_manifest(args) -> DatasetManifest:
    if args.manifest:
        with open(args.manifest) as f:
            return DatasetManifest.from_dict(json.load(f))
    mix = json.loads(args.mix) if args.mix else dict(DEFAULT_TASK_MIX)
    return DatasetManifest(record_count=args.count, seed=args.seed,
                           latent_size=args.latent_size, task_mix=mix)


def cmd_gen_data(args) -> int:
    manifest = _load_manifest(args)
    records = write_dataset(manifest, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    for tag, n in sorted(family_counts(records).items()):
        print(f"  {tag}: {n}")
    return 0


def _train_config(args) -> TrainConfig:
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
    else:
        raw = {"stages": [{"resolution": 8, "steps": 3000, "batch_size": 16, "lr": 1e-3}]}
    model_raw = raw.pop("model", None)
    config = TrainConfig.from_dict(raw)
    if args.seed is not None:
        config.seed = args.seed
    if args.mask_mode:
        config.mask_mode = args.mask_mode
    if args.weighted_loss:
        config.weighted_loss = args.weighted_loss == "on"
    if args.steps is not None:
        if len(config.stages) != 1:
            raise SystemExit("--steps override requires a single-stage config")
        config.stages[0].steps = args.steps
    args._model_config = ModelConfig.from_dict(model_raw) if model_raw else None
    return config


def cmd_train(args) -> int:
    manifest, records = read_dataset(args.data)
    codec = LatentCodec(manifest.codec_seed)
    config = _train_config(args)
    model_config = args._model_config or ModelConfig(mask_mode=config.mask_mode)
    train_recs, held = split_holdout(records, frac=args.holdout, seed=config.seed)
    if not train_recs:
        raise SystemExit("training split is empty")
    print(f"training on {len(train_recs)} records ({len(held)} held out), "
          f"mask_mode={config.mask_mode} weighted_loss={'on' if config.weighted_loss else 'off'}")
    model, metrics = train_model(config, train_recs, codec, model_config=model_config,
                                 eval_set=held, log=print)
    extra = {"train_config": config.to_dict(), "manifest": manifest.to_dict()}
    save_checkpoint(args.out, model, extra=extra)
    metrics_path = args.metrics or (args.out + ".metrics.csv")
    metrics.write_csv(metrics_path)
    final = f"final loss {metrics.losses[-1]:.4f}" if metrics.losses else "no steps run"
    print(f"saved checkpoint to {args.out} ({model.param_count()} parameters), "
          f"metrics to {metrics_path}, wall {metrics.wall_clock:.1f}s, {final}")
    return 0


def _record_from_args(args, channels: int = LATENT_CHANNELS) -> tuple[TaskRecord, LatentCodec | None]:
    if args.record:
        path, _, idx = args.record.rpartition(":")
        if not path:
            raise SystemExit("--record must look like DIR:INDEX")
        manifest, records = read_dataset(path)
        i = int(idx)
        if not 0 <= i < len(records):
            raise SystemExit(f"record index {i} out of range (dataset has {len(records)})")
        return records[i], LatentCodec(manifest.codec_seed)
    if args.instruction:
        side = args.latent_size
        target = np.zeros((channels, side, side), dtype=np.float32)
        record = TaskRecord(args.instruction, [], target, "t2i")
        validate_record(record)
        return record, None
    raise SystemExit("provide --record DIR:INDEX or --instruction TEXT")


def cmd_sample(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    record, data_codec = _record_from_args(args, model.config.latent_channels)
    codec = data_codec or LatentCodec(model.codec_seed)
    image_scale = args.image_scale
    if image_scale is None:
        image_scale = EDIT_IMAGE_SCALE if record.task_tag in ("edit", "fewshot") else 1.6
    gcfg = GuidanceConfig(text_scale=args.text_scale, image_scale=image_scale, steps=args.steps)
    print(f"sampling: steps={gcfg.steps} text_scale={gcfg.text_scale} "
          f"image_scale={gcfg.image_scale} seed={args.seed} kv_cache={args.kv_cache} "
          f"task={record.task_tag}")
    rng = np.random.default_rng(args.seed)
    lat = euler_sample(model, record, gcfg, rng, use_cache=args.kv_cache == "on")
    if args.latent_out:
        save_tensor(args.latent_out, lat)
    img = np.clip(codec.decode(lat), 0.0, 1.0)
    if args.upscale > 1:
        img = nearest_resize(img, img.shape[0] * args.upscale, img.shape[1] * args.upscale)
    write_ppm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    manifest, records = read_dataset(args.data)
    codec = LatentCodec(manifest.codec_seed)
    if args.split == "all":
        split = records
    else:
        train_recs, held = split_holdout(records, frac=args.holdout, seed=args.seed)
        split = held if args.split == "held" else train_recs
    if args.limit:
        split = split[:args.limit]
    if not split:
        raise SystemExit("evaluation split is empty")
    image_scale = args.image_scale if args.image_scale is not None else 1.6
    gcfg = GuidanceConfig(text_scale=args.text_scale, image_scale=image_scale, steps=args.steps)
    scores = evaluate(model, split, codec, gcfg, seed=args.seed,
                      use_cache=args.kv_cache == "on",
                      auto_edit_scale=args.image_scale is None,
                      use_targets=args.oracle_check)
    print(format_eval(scores))
    if args.out:
        write_eval_csv(args.out, scores)
        print(f"wrote {args.out}")
    return 0


def cmd_inspect_mask(args) -> int:
    record, _ = _record_from_args(args)
    side = record.target.shape[1]
    x_t = np.zeros_like(record.target)
    assembled = assemble(record, 0.0, x_t, drop_text=args.drop_text, drop_images=args.drop_images)
    layout = assembled.layout
    if layout.length > args.max_len:
        raise SystemExit(f"sequence length {layout.length} exceeds --max-len {args.max_len}")
    print(f"sequence length {layout.length}, latent {record.target.shape}, "
          f"mask_mode={args.mask_mode}")
    print(f"{'kind':<12} {'range':<14} {'image':<6} grid")
    for seg in layout.segments:
        rng_s = f"[{seg.start}, {seg.end})"
        img_s = "-" if seg.image_id is None else str(seg.image_id)
        grid_s = "-" if seg.grid is None else f"{seg.grid[0]}x{seg.grid[1]}"
        print(f"{seg.kind:<12} {rng_s:<14} {img_s:<6} {grid_s}")
    mask = build_attention_mask(layout, args.mask_mode)
    reference = attention_mask_reference(layout, args.mask_mode)
    for row in mask:
        print("".join("#" if a else "." for a in row))
    if not np.array_equal(mask, reference):
        print("MASK MISMATCH against the brute-force rule evaluator", file=sys.stderr)
        return 1
    print("mask matches the brute-force rule evaluator")
    return 0


def cmd_ablate(args) -> int:
    from .dataset import DatasetManifest

    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mix = {"edit": 1.0} if args.which == "weighted-loss" else {"t2i": 1.0}
    results = []
    for seed in seeds:
        manifest = DatasetManifest(record_count=args.records, seed=seed,
                                   latent_size=args.latent_size, task_mix=mix)
        data_dir = out / f"data_seed{seed}"
        if not (data_dir / "records.jsonl").exists():
            write_dataset(manifest, data_dir)
        _, records = read_dataset(data_dir)
        codec = LatentCodec(manifest.codec_seed)
        train_recs, held = split_holdout(records, seed=seed)
        stage = StageConfig(resolution=args.latent_size, steps=args.steps,
                            batch_size=args.batch_size, lr=args.lr)
        for variant in (("on", "hybrid"), ("off", "causal")):
            weighted, mask_mode = variant
            if args.which == "weighted-loss":
                config = TrainConfig(stages=[stage], seed=seed, weighted_loss=weighted == "on")
                label = f"weighted_loss={weighted}"
            else:
                config = TrainConfig(stages=[stage], seed=seed, mask_mode=mask_mode)
                label = f"mask_mode={mask_mode}"
            print(f"[seed {seed}] training {label} ...")
            model, metrics = train_model(config, train_recs, codec)
            ckpt = out / f"ckpt_seed{seed}_{label.replace('=', '_')}.bin"
            save_checkpoint(ckpt, model, extra={"train_config": config.to_dict()})
            if args.which == "weighted-loss":
                gcfg = GuidanceConfig(steps=args.eval_steps)
                scores = evaluate(model, held[:args.eval_limit], codec, gcfg, seed=seed)
                edit = scores["edit"]
                results.append((seed, label, edit["changed_change_rate"], edit["unchanged_preservation"]))
                print(f"[seed {seed}] {label}: change_rate={edit['changed_change_rate']:.3f} "
                      f"preservation={edit['unchanged_preservation']:.3f}")
            else:
                val = evaluate_flow_loss(model, held[:args.eval_limit], seed=seed)
                results.append((seed, label, val, metrics.losses[-1]))
                print(f"[seed {seed}] {label}: held_out_flow_loss={val:.4f}")
    _report_ablation(args.which, results, out)
    return 0


def _report_ablation(which: str, results: list, out: Path) -> None:
    import csv as _csv

    with open(out / "ablation.csv", "w", newline="") as f:
        writer = _csv.writer(f)
        if which == "weighted-loss":
            writer.writerow(["seed", "variant", "changed_change_rate", "unchanged_preservation"])
        else:
            writer.writerow(["seed", "variant", "held_out_flow_loss", "final_train_loss"])
        for row in results:
            writer.writerow(row)
    by_seed: dict[int, dict[str, tuple]] = {}
    for seed, label, a, b in results:
        by_seed.setdefault(seed, {})[label] = (a, b)
    print("--- ablation summary ---")
    for seed, pair in sorted(by_seed.items()):
        labels = sorted(pair)
        if which == "weighted-loss":
            on = pair.get("weighted_loss=on")
            off = pair.get("weighted_loss=off")
            if on and off:
                print(f"seed {seed}: change_rate on={on[0]:.3f} off={off[0]:.3f} "
                      f"delta={on[0] - off[0]:+.3f}; preservation on={on[1]:.3f} off={off[1]:.3f}")
        else:
            hyb = pair.get("mask_mode=hybrid")
            cau = pair.get("mask_mode=causal")
            if hyb and cau:
                print(f"seed {seed}: held-out flow loss hybrid={hyb[0]:.4f} causal={cau[0]:.4f} "
                      f"{'hybrid lower' if hyb[0] < cau[0] else 'NOT lower'}")


if __name__ == "__main__":
    sys.exit(main())
