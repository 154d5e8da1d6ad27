"""Command-line surface.

Subcommands cover the whole workflow: dataset generation, the two training
stages, the retargeting transforms, baselines, the mAP-ratio experiment,
an animation sweep, and an HTTP server.  `--config` points at a JSON file
whose keys override built-in defaults; explicit flags override both.
Exit codes: 0 success, 1 usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, dataset, evaluate, nets, shift, train
from .errors import ConfigurationError, ShiftwarpError
from .service import create_app, load_or_fail
from .tensor import Node

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class UsageError(Exception):
    """Bad invocation; reported on stderr with exit code 1."""


class _ParserExit(UsageError):
    def __init__(self, message, prog):
        super().__init__(message)
        self.prog = prog


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _ParserExit(message, self.prog)


def build_parser() -> Parser:
    parser = Parser(prog="shiftwarp", description=__doc__)
    parser.add_argument("--config", help="JSON file with default options")
    parser.add_argument("--seed", type=int, help="override every seed")
    sub = parser.add_subparsers(dest="command", metavar="command")
    parser.sub_commands = {}

    def add_parser(name, **kw):
        p = sub.add_parser(name, **kw)
        parser.sub_commands[name] = p
        return p

    p = add_parser("gen-data", help="render the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=0)

    p = add_parser("pretrain", help="train the multi-label classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=8,
                   help="base channel width of the classifier")
    p.add_argument("--log", help="NDJSON log path")
    _train_flags(p)

    p = add_parser("train", help="train the retargeting decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="NDJSON log path")
    p.add_argument("--holdout", type=int, default=0,
                   help="cap the eval split used for model selection (0 = all)")
    _train_flags(p)

    p = add_parser("retarget", help="content-aware width/height reduction")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--width", type=int)
    group.add_argument("--height", type=int)
    group.add_argument("--ratio", type=float)
    p.add_argument("--checkpoint", help="required unless --server is given")
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--dump-attention",
                   help="write the resized attention map as 16-bit PNG")
    p.add_argument("--dump-shift", help="write the shift map as a tensor file")
    p.add_argument("--server", help="delegate to a running HTTP service")

    p = add_parser("enlarge", help="attention-guided widening")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--factor", type=float, required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--checkpoint", help="required unless --server is given")
    p.add_argument("--server", help="delegate to a running HTTP service")

    p = add_parser("baseline", help="classical retargeting methods")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", required=True,
                   choices=sorted(baselines.METHODS))
    group = p.add_mutually_exclusive_group()
    group.add_argument("--width", type=int)
    group.add_argument("--ratio", type=float)
    p.add_argument("--server", help="delegate to a running HTTP service")

    p = add_parser("eval", help="mAP-ratio preservation experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-classifier", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--scales", default="0.7,0.6,0.5,0.4,0.3")
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--gamma", type=float, default=1.0)

    p = add_parser("anim", help="emit a ratio sweep as numbered frames")
    p.add_argument("--input", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--frames", type=int, default=13,
                   help="frame count across the 0.9 to 0.3 sweep")

    p = add_parser("serve", help="run the HTTP service")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _train_flags(p) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--w-s", dest="w_s", type=float)
    p.add_argument("--ratio-min", type=float)
    p.add_argument("--ratio-max", type=float)
    p.add_argument("--train-seed", type=int, default=0)


def _train_config(args) -> train.TrainConfig:
    overrides = {k: getattr(args, k) for k in
                 ("lr", "momentum", "batch", "epochs", "lam", "gamma", "w_s",
                  "ratio_min", "ratio_max") if getattr(args, k) is not None}
    overrides["seed"] = args.train_seed if args.seed is None else args.seed
    return train.TrainConfig(**overrides)


def _open_log(path):
    return open(path, "w") if path else None


def _load_image(path) -> np.ndarray:
    if not Path(path).exists():
        raise ConfigurationError(f"input image {path} does not exist")
    return dataset.load_png(path)


def _require_checkpoint(args) -> str:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required without --server")
    return args.checkpoint


# -- subcommand bodies --------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = args.data_seed if args.seed is None else args.seed
    cfg = dataset.DatasetConfig(count=args.count, seed=seed, size=args.size)
    manifest = dataset.generate_dataset(cfg, args.out)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    train_split = dataset.load_split(args.data, "train")
    eval_split = dataset.load_split(args.data, "eval")
    log = _open_log(args.log)
    try:
        model = train.pretrain_classifier(train_split, eval_split, cfg,
                                          width=args.width, log=log)
    finally:
        if log:
            log.close()
    nets.save_checkpoint(model, args.out)
    print(f"saved classifier to {args.out} "
          f"(eval mAP {train._holdout_map(model, eval_split):.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    classifier = load_or_fail(args.classifier)
    train_split = dataset.load_split(args.data, "train")
    eval_split = dataset.load_split(args.data, "eval")
    if args.holdout:
        eval_split = eval_split[:args.holdout]
    log = _open_log(args.log)
    try:
        model = train.train_retargeter(train_split, eval_split, classifier,
                                       cfg, log=log)
    finally:
        if log:
            log.close()
    nets.save_checkpoint(model, args.out)
    print(f"saved retargeting model to {args.out}")
    return 0


def _post(server: str, route: str, payload: dict, output: str) -> int:
    import httpx

    reply = httpx.post(server.rstrip("/") + route, json=payload,
                       timeout=120.0)
    if reply.status_code != 200:
        raise ShiftwarpError(f"server returned {reply.status_code}: "
                             f"{reply.text}")
    body = reply.json()
    Path(output).write_bytes(base64.b64decode(body["image"]))
    return 0


def _encode_file(path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode("ascii")


def cmd_retarget(args) -> int:
    given = [v for v in (args.width, args.height, args.ratio) if v is not None]
    if len(given) != 1:
        raise UsageError("provide exactly one of --width, --height, --ratio")
    if args.server:
        if args.height is not None:
            raise UsageError("--height is not supported in server mode")
        payload = {"image": _encode_file(args.input), "width": args.width,
                   "ratio": args.ratio, "lam": args.lam}
        return _post(args.server, "/retarget", payload, args.output)

    image = _load_image(args.input)
    model = load_or_fail(_require_checkpoint(args))
    h, w = image.shape[:2]
    node = Node(dataset.u8_to_unit(image))
    if args.height is not None:
        out_value = shift.retarget_height(node, model, args.height, args.lam)
        dumps_available = False
    else:
        target = args.width if args.width is not None \
            else max(1, round(args.ratio * w))
        spec = shift.RetargetSpec(h, w, target, args.lam)
        result = shift.retarget_width(node, model, spec)
        out_value = result.output.value
        dumps_available = True
    dataset.save_png(dataset.unit_to_u8(out_value), args.output)
    if args.dump_attention:
        if not dumps_available:
            raise UsageError("--dump-attention requires a width retarget")
        shift.save_attention_png(result.resized, args.dump_attention)
    if args.dump_shift:
        if not dumps_available:
            raise UsageError("--dump-shift requires a width retarget")
        shift.save_shift_map(result.shift, args.dump_shift)
    return 0


def cmd_enlarge(args) -> int:
    if args.server:
        payload = {"image": _encode_file(args.input), "factor": args.factor,
                   "gamma": args.gamma, "lam": args.lam}
        return _post(args.server, "/enlarge", payload, args.output)
    image = _load_image(args.input)
    model = load_or_fail(_require_checkpoint(args))
    h, w = image.shape[:2]
    spec = shift.RetargetSpec(h, w, max(1, round(args.factor * w)),
                              args.lam, args.gamma)
    widened = shift.enlarge(Node(dataset.u8_to_unit(image)), model, spec)
    dataset.save_png(dataset.unit_to_u8(widened), args.output)
    return 0


def cmd_baseline(args) -> int:
    if (args.width is None) == (args.ratio is None):
        raise UsageError("provide exactly one of --width, --ratio")
    image = None if args.server else _load_image(args.input)
    width = args.width
    if width is None:
        source = dataset.load_png(args.input).shape[1] if image is None \
            else image.shape[1]
        width = max(1, round(args.ratio * source))
    if args.server:
        payload = {"image": _encode_file(args.input), "method": args.method,
                   "width": width}
        return _post(args.server, "/baseline", payload, args.output)
    out = baselines.METHODS[args.method](image, width)
    dataset.save_png(out, args.output)
    return 0


def cmd_eval(args) -> int:
    try:
        scales = [float(s) for s in str(args.scales).split(",") if s != ""]
    except ValueError as exc:
        raise UsageError(f"bad --scales value: {exc}")
    if not scales:
        raise UsageError("--scales must list at least one fraction")
    model = load_or_fail(args.checkpoint)
    eval_clf = load_or_fail(args.eval_classifier)
    samples = dataset.load_split(args.data, "eval")
    report = evaluate.map_ratio_experiment(
        samples, model, eval_clf, scales=scales, lam=args.lam,
        gamma=args.gamma,
        meta={"checkpoint": str(args.checkpoint),
              "eval_classifier": str(args.eval_classifier)})
    out = Path(args.out)
    out.write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv())
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


def cmd_anim(args) -> int:
    if args.frames < 2:
        raise UsageError("--frames must be >= 2")
    image = _load_image(args.input)
    model = load_or_fail(args.checkpoint)
    h, w = image.shape[:2]
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    node = Node(dataset.u8_to_unit(image))
    ratios = np.linspace(0.9, 0.3, args.frames)
    for i, ratio in enumerate(ratios):
        spec = shift.RetargetSpec(h, w, max(1, round(ratio * w)), args.lam)
        result = shift.retarget_width(node, model, spec)
        dataset.save_png(dataset.unit_to_u8(result.output.value),
                         out_dir / f"frame_{i:03d}.png")
    print(f"wrote {args.frames} frames to {out_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    app = create_app(checkpoint=args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "retarget": cmd_retarget,
    "enlarge": cmd_enlarge,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "anim": cmd_anim,
    "serve": cmd_serve,
}


def _apply_config(parser: Parser, argv: list) -> None:
    probe = Parser(add_help=False)
    probe.add_argument("--config")
    try:
        known, _ = probe.parse_known_args(argv)
    except UsageError:
        return  # the real parser will report it
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: "
                                 f"{exc}")
    if not isinstance(values, dict):
        raise ConfigurationError("config file must hold a JSON object")
    # subparsers start from their own namespaces, so defaults go everywhere
    parser.set_defaults(**values)
    for sub in parser.sub_commands.values():
        sub.set_defaults(**{k: v for k, v in values.items()
                            if any(a.dest == k for a in sub._actions)})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return USAGE_EXIT
        return COMMANDS[args.command](args)
    except UsageError as exc:
        prog = getattr(exc, "prog", "shiftwarp")
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (ShiftwarpError, OSError) as exc:
        print(f"shiftwarp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    raise SystemExit(main())
