"""Command-line entry point.

One executable with a subcommand per pipeline stage. Every run writes a
manifest (resolved config, seed, content hashes of inputs, timings)
beside its outputs. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tarfile
import tempfile
import time
import urllib.error
import urllib.request
from pathlib import Path

import torch

from . import dataset_io, disc_features, eval_bench, gan_core, ssd_detector, synth_data
from .config import RunConfig, load_run_config
from .enhancer import ProjectionConfig, enhance_chip, project_latent, resize_chip
from .errors import DataError, NumericalError

CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seed: int,
    inputs: dict[str, Path],
    timings: dict[str, float],
    name: str = "manifest.json",
) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {
            key: {"path": str(p), "sha256": sha256_file(Path(p))}
            for key, p in inputs.items()
            if Path(p).is_file()
        },
        "input_dirs": {
            key: str(p) for key, p in inputs.items() if not Path(p).is_file()
        },
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _flag_overrides(args, mapping: dict[str, tuple[str, ...]]) -> dict:
    """Map provided argparse values onto nested run-config keys."""
    overrides: dict = {}
    for attr, key_path in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = overrides
        for key in key_path[:-1]:
            node = node.setdefault(key, {})
        node[key_path[-1]] = value
    return overrides


def _resolve(args, mapping: dict[str, tuple[str, ...]]) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None), _flag_overrides(args, mapping))
    torch.set_num_threads(max(1, cfg.workers))
    return cfg


def _load_train_records(data_dir: Path, limit: int | None) -> list[dataset_io.CifarRecord]:
    records: list[dataset_io.CifarRecord] = []
    found = False
    for name in TRAIN_FILES:
        path = data_dir / name
        if path.exists():
            found = True
            records.extend(dataset_io.load_cifar10(path))
            if limit is not None and len(records) >= limit:
                break
    if not found:
        raise DataError(f"no training batches ({TRAIN_FILES[0]} ...) under {data_dir}")
    return records[:limit] if limit is not None else records


def cmd_fetch_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if args.synthetic:
        synth_data.write_synthetic_cifar(out, args.n_train, args.n_test, args.seed)
        source = "synthetic"
    else:
        try:
            with tempfile.TemporaryDirectory() as tmp:
                archive = Path(tmp) / "cifar.tar.gz"
                urllib.request.urlretrieve(args.url, archive)
                with tarfile.open(archive, "r:gz") as tar:
                    for member in tar.getmembers():
                        base = Path(member.name).name
                        if base.endswith(".bin") and member.isfile():
                            payload = tar.extractfile(member).read()
                            (out / base).write_bytes(payload)
        except (urllib.error.URLError, OSError) as exc:
            raise DataError(
                f"download from {args.url} failed ({exc}); "
                "rerun with --synthetic to generate a local stand-in dataset"
            ) from exc
        source = args.url
    for name in TRAIN_FILES + (TEST_FILE,):
        if not (out / name).exists():
            raise DataError(f"fetch finished but {name} is missing under {out}")
    n = sum(len(dataset_io.load_cifar10(out / f)) for f in TRAIN_FILES)
    print(f"fetched {n} train records from {source} into {out}")
    write_manifest(
        out,
        "fetch-data",
        {"source": source, "n_train": args.n_train, "n_test": args.n_test},
        args.seed,
        {name: out / name for name in TRAIN_FILES + (TEST_FILE,)},
        {"total": time.perf_counter() - t0},
    )
    return 0


def cmd_train_gan(args) -> int:
    cfg = _resolve(
        args,
        {
            "seed": ("seed",),
            "epochs": ("gan", "epochs"),
            "batch_size": ("gan", "batch_size"),
            "checkpoint_every": ("gan", "checkpoint_every"),
            "workers": ("workers",),
        },
    )
    data_dir = Path(args.data or cfg.data_dir)
    out = Path(args.out)
    records = _load_train_records(data_dir, args.limit)
    t0 = time.perf_counter()
    g, d, log = gan_core.train_gan(records, cfg.gan, checkpoint_dir=out, progress=args.progress)
    train_s = time.perf_counter() - t0
    gan_core.write_training_log(out / "training_log.csv", log)
    print(
        f"trained GAN on {len(records)} records for {cfg.gan.epochs} epochs "
        f"({len(log)} iterations, {train_s:.1f}s); checkpoint at {out / 'gan_final.ckpt'}"
    )
    write_manifest(
        out,
        "train-gan",
        cfg.to_dict(),
        cfg.seed,
        {"data_dir": data_dir},
        {"train": train_s},
    )
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _resolve(args, {"seed": ("seed",), "workers": ("workers",)})
    data_dir = Path(args.data or cfg.data_dir)
    out = Path(args.out)
    gan_path = Path(args.gan)
    if not gan_path.exists():
        raise DataError(f"GAN checkpoint not found: {gan_path}")
    _, d, _ = gan_core.load_gan_checkpoint(gan_path)
    records = _load_train_records(data_dir, args.limit)
    chips = dataset_io.records_to_tensor(records)
    labels = dataset_io.record_labels(records)
    t0 = time.perf_counter()
    feats = _extract_in_batches(d, chips)
    extract_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    clf = disc_features.train_linear(
        feats,
        labels.tolist(),
        l2_lambda=args.l2_lambda,
        seed=cfg.seed,
        max_iter=args.max_iter,
        progress=args.progress,
    )
    fit_s = time.perf_counter() - t0
    disc_features.save_classifier(out / "classifier.ckpt", clf)
    msg = f"classifier trained on {len(records)} chips; saved to {out / 'classifier.ckpt'}"
    if args.eval_n > 0:
        test_path = data_dir / TEST_FILE
        if not test_path.exists():
            raise DataError(f"--eval-n given but {test_path} is missing")
        test = dataset_io.load_cifar10(test_path)[: args.eval_n]
        test_feats = _extract_in_batches(d, dataset_io.records_to_tensor(test))
        cls, _ = disc_features.classify_features(clf, test_feats)
        truth = torch.as_tensor(dataset_io.record_labels(test), dtype=torch.long)
        acc = float((cls == truth).float().mean())
        msg += f"; held-out accuracy {acc:.3f} on {len(test)} chips"
    print(msg)
    write_manifest(
        out,
        "train-classifier",
        cfg.to_dict(),
        cfg.seed,
        {"gan": gan_path, "data_dir": data_dir},
        {"extract": extract_s, "fit": fit_s},
    )
    return 0


def _extract_in_batches(d, chips: torch.Tensor, batch: int = 200) -> torch.Tensor:
    parts = [
        disc_features.extract_features_batch(d, chips[i : i + batch])
        for i in range(0, len(chips), batch)
    ]
    return torch.cat(parts)


def cmd_compose_bench(args) -> int:
    cfg = _resolve(
        args,
        {
            "seed": ("seed",),
            "n_scenes": ("bench", "n_scenes"),
            "workers": ("workers",),
        },
    )
    data_dir = Path(args.data or cfg.data_dir)
    out = Path(args.out)
    if args.split == "train":
        records = _load_train_records(data_dir, None)
    else:
        test_path = data_dir / TEST_FILE
        if not test_path.exists():
            raise DataError(f"test batch not found: {test_path}")
        records = dataset_io.load_cifar10(test_path)
    t0 = time.perf_counter()
    scenes, _levels = dataset_io.build_benchmark(records, cfg.bench)
    dataset_io.save_scene_archive(scenes, out)
    print(f"composed {len(scenes)} scenes into {out}")
    write_manifest(
        out,
        "compose-bench",
        cfg.to_dict(),
        cfg.seed,
        {"data_dir": data_dir},
        {"compose": time.perf_counter() - t0},
    )
    return 0


def cmd_train_detector(args) -> int:
    cfg = _resolve(
        args,
        {
            "seed": ("seed",),
            "epochs": ("detector", "epochs"),
            "batch_size": ("detector", "batch_size"),
            "learning_rate": ("detector", "learning_rate"),
            "workers": ("workers",),
        },
    )
    scenes_dir = Path(args.scenes)
    out = Path(args.out)
    scenes = dataset_io.load_scene_archive(scenes_dir)
    t0 = time.perf_counter()
    net, log = ssd_detector.train_detector(scenes, cfg.detector, progress=args.progress)
    train_s = time.perf_counter() - t0
    ssd_detector.write_detector_log(out / "training_log.csv", log)
    ssd_detector.save_detector(out / "detector.ckpt", net)
    print(
        f"trained detector on {len(scenes)} scenes ({len(log)} iterations, {train_s:.1f}s); "
        f"checkpoint at {out / 'detector.ckpt'}"
    )
    write_manifest(
        out, "train-detector", cfg.to_dict(), cfg.seed, {"scenes": scenes_dir}, {"train": train_s}
    )
    return 0


def cmd_enhance(args) -> int:
    cfg = _resolve(
        args,
        {
            "seed": ("projection", "seed"),
            "steps": ("projection", "steps"),
            "restarts": ("projection", "restarts"),
            "step_size": ("projection", "step_size"),
            "perceptual_weight": ("projection", "perceptual_weight"),
            "workers": ("workers",),
        },
    )
    gan_path = Path(args.gan)
    in_path = Path(args.infile)
    if not in_path.exists():
        raise DataError(f"input image not found: {in_path}")
    g, d, _ = gan_core.load_gan_checkpoint(gan_path)
    from PIL import Image

    chip = dataset_io.image_to_chip(Image.open(in_path))
    t0 = time.perf_counter()
    proj = cfg.projection
    if proj.steps == 0:
        enhanced = enhance_chip(g, chip, proj, d)
        print("identity mode (steps = 0): wrote the resized input")
    else:
        result = project_latent(g, resize_chip(chip), proj, d)
        enhanced = result.enhanced
        print(
            f"projection loss {result.initial_loss:.5f} -> {result.final_loss:.5f} "
            f"over {proj.steps} steps x {proj.restarts} restarts"
        )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dataset_io.chip_to_image(enhanced).save(out_path)
    write_manifest(
        out_path.parent,
        "enhance",
        cfg.to_dict(),
        proj.seed,
        {"gan": gan_path, "input": in_path},
        {"enhance": time.perf_counter() - t0},
        name=out_path.stem + ".manifest.json",
    )
    return 0


def cmd_detect(args) -> int:
    cfg = _resolve(args, {"seed": ("seed",), "workers": ("workers",)})
    det_path = Path(args.detector)
    scenes_dir = Path(args.scenes)
    if not det_path.exists():
        raise DataError(f"detector checkpoint not found: {det_path}")
    net = ssd_detector.load_detector(det_path)
    scenes = dataset_io.load_scene_archive(scenes_dir)
    t0 = time.perf_counter()
    per_scene = [
        ssd_detector.detect(net, scene.canvas, conf_thr=args.conf_thr) for scene in scenes
    ]
    out_path = Path(args.out)
    ssd_detector.save_detections_jsonl(out_path, per_scene)
    total = sum(len(d) for d in per_scene)
    print(f"{total} detections over {len(scenes)} scenes written to {out_path}")
    write_manifest(
        out_path.parent,
        "detect",
        cfg.to_dict(),
        cfg.seed,
        {"detector": det_path, "scenes": scenes_dir},
        {"detect": time.perf_counter() - t0},
        name=out_path.stem + ".manifest.json",
    )
    return 0


def cmd_compare(args) -> int:
    cfg = _resolve(args, {"seed": ("seed",), "workers": ("workers",)})
    out = Path(args.out)
    paths = {
        "gan": Path(args.gan),
        "classifier": Path(args.classifier),
        "detector": Path(args.detector),
    }
    for label, p in paths.items():
        if not p.exists():
            raise DataError(f"{label} checkpoint not found: {p}")
    g, d, _ = gan_core.load_gan_checkpoint(paths["gan"])
    clf = disc_features.load_classifier(paths["classifier"])
    net = ssd_detector.load_detector(paths["detector"])

    t0 = time.perf_counter()
    if args.scenes:
        scenes = dataset_io.load_scene_archive(Path(args.scenes))
        scene_source = str(args.scenes)
    else:
        data_dir = Path(args.data or cfg.data_dir)
        test_path = data_dir / TEST_FILE
        if not test_path.exists():
            raise DataError(f"test batch not found: {test_path}")
        records = dataset_io.load_cifar10(test_path)
        scenes, _ = dataset_io.build_benchmark(records, cfg.bench)
        scene_source = f"composed from {test_path}"
    compose_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = eval_bench.run_comparison(
        scenes,
        g,
        d,
        clf,
        net,
        cfg.cascade,
        cfg.eval,
        seeds={"global": cfg.seed, "bench_base_seed": cfg.bench.base_seed},
        progress=args.progress,
    )
    compare_s = time.perf_counter() - t0
    files = eval_bench.emit_report(report, out)
    agg = report.aggregate
    print(
        f"aggregate detection rate: detector only {agg['baseline']:.3f}, "
        f"cascade {agg['cascade']:.3f} over {len(scenes)} scenes "
        f"(reference comparison: {eval_bench.REFERENCE_RATES['ssd_only']:.3f} "
        f"vs {eval_bench.REFERENCE_RATES['dcgan_ssd']:.3f})"
    )
    for name, path in files.items():
        print(f"  {name}: {path}")
    inputs = dict(paths)
    if args.scenes:
        inputs["scenes"] = Path(args.scenes)
    write_manifest(
        out,
        "compare",
        cfg.to_dict(),
        cfg.seed,
        inputs,
        {"compose": compose_s, "compare": compare_s},
    )
    print(f"scene source: {scene_source}")
    return 0


def cmd_report(args) -> int:
    in_path = Path(args.infile)
    if not in_path.exists():
        raise DataError(f"report not found: {in_path}")
    try:
        data = json.loads(in_path.read_text())
        report = eval_bench.report_from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{in_path} is not a valid report: {exc}") from exc
    files = eval_bench.emit_report(report, Path(args.out))
    for name, path in files.items():
        print(f"  {name}: {path}")
    write_manifest(
        Path(args.out),
        "report",
        {"source": str(in_path)},
        0,
        {"report": in_path},
        {},
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gandetect",
        description="GAN-enhanced object detection pipeline: data, training, cascade, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON run config path")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--workers", type=int, default=None, help="torch thread count (default 1)")

    p = sub.add_parser("fetch-data", help="download CIFAR-10 binaries or generate a synthetic stand-in")
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", action="store_true", help="generate procedural chips instead of downloading")
    p.add_argument("--n-train", type=int, default=12000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--url", default=CIFAR_URL)
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("train-gan", help="train the generator/discriminator pair")
    add_common(p)
    p.add_argument("--data", default=None, help="directory with CIFAR-format batches")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--limit", type=int, default=None, help="use only the first N records")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("train-classifier", help="fit the discriminator-feature linear classifier")
    add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--gan", required=True, help="GAN checkpoint path")
    p.add_argument("--out", required=True)
    p.add_argument("--l2-lambda", type=float, default=1e-4, dest="l2_lambda")
    p.add_argument("--max-iter", type=int, default=5000, dest="max_iter")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--eval-n", type=int, default=0, dest="eval_n", help="also report held-out accuracy on N test chips")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("compose-bench", help="compose benchmark scenes into an archive")
    add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=None, dest="n_scenes")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_compose_bench)

    p = sub.add_parser("train-detector", help="train the detector on composed scenes")
    add_common(p)
    p.add_argument("--scenes", required=True, help="scene archive directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("enhance", help="enhance one chip image by latent projection")
    add_common(p)
    p.add_argument("--gan", required=True)
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None, dest="step_size")
    p.add_argument("--perceptual-weight", type=float, default=None, dest="perceptual_weight")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("detect", help="run the detector over a scene archive")
    add_common(p)
    p.add_argument("--detector", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="output JSON-lines path")
    p.add_argument("--conf-thr", type=float, default=0.5, dest="conf_thr")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("compare", help="run both arms over the benchmark and emit reports")
    add_common(p)
    p.add_argument("--gan", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--scenes", default=None, help="scene archive; composed from config when omitted")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="re-render report files from an existing report.json")
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help.
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
