"""Command-line front end.

Subcommands: ``simulate`` (full federation run with CSV/checkpoint/manifest
outputs), ``gen-data`` (export synthetic phantoms as PNG pairs), ``eval``
(one-shot evaluation of a checkpoint, optionally with mask overlays), and
``gradcheck`` (gradient-check suite).

Exit codes: 0 success, 1 runtime failure, 2 invalid input. All commands are
non-interactive and write only under the requested output directory.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .checks import gradient_check_report
from .config import (
    RunSettings,
    load_config_file,
    merge_config,
    read_manifest,
    resolve,
    write_manifest,
)
from .data import (
    Label,
    build_partition,
    export_dataset,
    generate_labeled_set,
    load_bus_directory,
    parse_composition,
)
from .errors import CheckpointError, ConfigError, DataError, FedsegError
from .fedcore import evaluate_model, run_federation
from .metrics import METRIC_NAMES, MetricsRow
from .model import AttentionUNet

ROUNDS_CSV_HEADER = "round," + ",".join(METRIC_NAMES)
CLIENTS_CSV_HEADER = "round,client," + ",".join(METRIC_NAMES)


def _format_metrics(row: MetricsRow) -> str:
    return ",".join(f"{v:.6f}" for v in row.values())


def _load_run_config(args) -> dict[str, object]:
    if args.manifest and args.config:
        raise ConfigError("pass either --config or --manifest, not both")
    if args.manifest:
        config = read_manifest(args.manifest)
    elif args.config:
        config = load_config_file(args.config)
    else:
        raise ConfigError("either --config or --manifest is required")
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["fed.seed"] = args.seed
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    if args.sequential is not None:
        overrides["run.sequential"] = args.sequential
    return merge_config(config, overrides)


def _training_datasets(settings: RunSettings):
    if settings.data_source == "directory":
        samples, report = load_bus_directory(settings.data_dir, settings.image_size)
        if report.skipped:
            print(f"warning: skipped {len(report.skipped)} unreadable files",
                  file=sys.stderr)
        return settings.plan, samples
    return settings.plan, None


def cmd_simulate(args) -> int:
    config = _load_run_config(args)
    settings = resolve(config)
    out_dir = Path(settings.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    checkpoints = [f"round_{k}.fpwt" for k in range(1, settings.fed.rounds + 1)]
    write_manifest(out_dir / "manifest.json", config, {
        "rounds_csv": "rounds.csv",
        "clients_csv": "clients.csv",
        "checkpoints": checkpoints,
        "package_version": __version__,
    })

    plan, source = _training_datasets(settings)
    rounds_path = out_dir / "rounds.csv"
    clients_path = out_dir / "clients.csv"
    rounds_path.write_text(ROUNDS_CSV_HEADER + "\n")
    clients_path.write_text(CLIENTS_CSV_HEADER + "\n")

    def on_round_end(report, weights, model):
        with rounds_path.open("a") as fh:
            fh.write(f"{report.round},{_format_metrics(report.server_metrics)}\n")
        with clients_path.open("a") as fh:
            for cid, row in enumerate(report.per_client_metrics):
                fh.write(f"{report.round},{cid},{_format_metrics(row)}\n")
        save_checkpoint(out_dir / f"round_{report.round}.fpwt", model.state_dict())
        print(f"round {report.round}: "
              + " ".join(f"{k}={v:.4f}" for k, v in
                         report.server_metrics.as_dict().items())
              + f" ({report.wall_time:.1f}s)")

    started = time.perf_counter()
    run_federation(
        settings.fed,
        plan,
        model_config=settings.model,
        augmentation=settings.augmentation,
        image_size=settings.image_size,
        source=source,
        parallel=not settings.sequential,
        on_round_end=on_round_end,
    )
    print(f"completed {settings.fed.rounds} rounds in "
          f"{time.perf_counter() - started:.1f}s; outputs in {out_dir}")
    return 0


def cmd_gen_data(args) -> int:
    counts = {Label.NORMAL: args.normal, Label.BENIGN: args.benign,
              Label.MALIGNANT: args.malignant}
    if all(v <= 0 for v in counts.values()):
        raise ConfigError("requested zero samples; pass --benign/--malignant/--normal")
    samples = generate_labeled_set(counts, args.size, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_dataset(samples, out_dir)
    for label in Label:
        n = sum(1 for s in samples if s.label is label)
        print(f"{label.value}: {n}")
    return 0


def _mask_boundary(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def _write_overlay(path, image, truth_mask, pred_mask) -> None:
    canvas = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    canvas[_mask_boundary(truth_mask)] = 170
    canvas[_mask_boundary(pred_mask)] = 255
    Image.fromarray(canvas, mode="L").save(path)


def _eval_dataset(args):
    sources = [s for s in (args.data, args.synthetic, args.manifest) if s]
    if len(sources) != 1:
        raise ConfigError("exactly one of --data, --synthetic, --manifest is required")
    if args.manifest:
        settings = resolve(read_manifest(args.manifest))
        if settings.data_source == "directory":
            pool, _ = load_bus_directory(settings.data_dir, settings.image_size)
            _, server = build_partition(settings.plan, settings.image_size, source=pool)
        else:
            _, server = build_partition(settings.plan, settings.image_size)
        return server, settings.model
    if args.data:
        samples, _ = load_bus_directory(args.data, args.size)
        return samples, None
    comp = parse_composition(args.synthetic)
    counts = {label: count for label, count in comp}
    return generate_labeled_set(counts, args.size, args.seed or 0), None


def cmd_eval(args) -> int:
    from .model import ModelConfig

    dataset, model_config = _eval_dataset(args)
    if model_config is None:
        model_config = ModelConfig(depth=args.depth, base_channels=args.base_channels,
                                   attention_enabled=args.attention)
    model = AttentionUNet(model_config)

    state = load_checkpoint(args.checkpoint)
    expected = model.state_dict()
    if list(state) != list(expected):
        for got, want in zip(list(state) + ["<missing>"], list(expected) + ["<extra>"]):
            if got != want:
                raise CheckpointError(
                    f"checkpoint does not match architecture: has {got!r} where "
                    f"model expects {want!r}")
    for name, arr in state.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(
                f"checkpoint tensor {name} has shape {arr.shape}, model expects "
                f"{expected[name].shape}")
    model.load_state_dict(state)

    row = evaluate_model(model, dataset)
    print(",".join(METRIC_NAMES))
    print(_format_metrics(row))

    if args.overlays:
        out_dir = Path(args.out or "overlays")
        out_dir.mkdir(parents=True, exist_ok=True)
        from .tensor import no_grad
        with no_grad():
            for i, sample in enumerate(dataset):
                probs = model.forward(sample.image[None, None]).data[0, 0]
                _write_overlay(out_dir / f"overlay_{i:04d}.png", sample.image,
                               sample.mask, probs >= 0.5)
        print(f"wrote {len(dataset)} overlays to {out_dir}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_check_report(fault_op=args.inject_fault)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: max_rel_error={r.max_rel_error:.3e} "
              f"tolerance={r.tolerance:.0e} {status}")
        failed |= not r.passed
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseg",
        description="Federated breast-lesion segmentation simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a federation and write CSVs/checkpoints")
    sim.add_argument("--config", help="flat dotted-key config file")
    sim.add_argument("--manifest", help="manifest.json of a previous run to reproduce")
    sim.add_argument("--out", help="output directory (overrides run.out_dir)")
    sim.add_argument("--seed", type=int, help="overrides fed.seed")
    sim.add_argument("--sequential", action=argparse.BooleanOptionalAction,
                     default=None, help="deterministic client order (default on)")
    sim.set_defaults(func=cmd_simulate)

    gen = sub.add_parser("gen-data", help="write synthetic phantom PNG pairs")
    gen.add_argument("--out", required=True)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--benign", type=int, default=0)
    gen.add_argument("--malignant", type=int, default=0)
    gen.add_argument("--normal", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="BUS-layout directory")
    ev.add_argument("--synthetic", help="composition like 'benign:10,normal:5'")
    ev.add_argument("--manifest", help="reuse a run's server test set and model")
    ev.add_argument("--size", type=int, default=64)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--depth", type=int, default=3)
    ev.add_argument("--base-channels", type=int, default=16)
    ev.add_argument("--attention", action=argparse.BooleanOptionalAction, default=True)
    ev.add_argument("--overlays", action="store_true",
                    help="write boundary overlays next to the metrics")
    ev.add_argument("--out", help="overlay output directory")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--inject-fault", metavar="OP",
                    help="test hook: corrupt the named op's backward rule")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FedsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
