"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data error. Everything goes through
the library modules; this file only parses arguments and moves bytes.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys

import numpy as np

from minisol import ingest, passes, schedule
from minisol.backends import Injected, Measured, PlanFormatError, load_cost_csv
from minisol.backends.plan import ExecutionPlan, ShapeMismatch, UnboundVdim

log = logging.getLogger("minisol")


class UsageError(Exception):
    pass


class BadToken(UsageError):
    def __init__(self, text, pos):
        super().__init__(f"bad vdim token at position {pos}: {text[pos:]!r}")
        self.pos = pos


_TOKEN = re.compile(r"\s*#(\d+)\s*=\s*(true|false|\d+)\s*(,|$)", re.IGNORECASE)


def vdims_flag_parse(text: str) -> dict:
    """``#k=true|false|<int>`` tokens, comma separated, to a binding dict."""
    binding: dict = {}
    pos = 0
    if not text.strip():
        return binding
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise BadToken(text, pos)
        k, v = int(m.group(1)), m.group(2).lower()
        if k in binding:
            raise BadToken(text, pos)
        if v in ("true", "false"):
            binding[k] = v == "true"
        else:
            if int(v) < 1:
                raise BadToken(text, m.start(2))
            binding[k] = int(v)
        pos = m.end()
        if m.group(3) == "," and pos >= len(text):
            raise BadToken(text, pos)
    return binding


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minisol", description="Compile, inspect and run small neural networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_cmd(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("model", help="model document (.json)")
        return c

    def tuning_flags(c):
        c.add_argument("--cost-model", metavar="FILE",
                       help="CSV node,backend,cost for reproducible tuning; 'ref' puts every layer on REF")

    c = model_cmd("inspect", "print the layer summary")
    c.add_argument("--name", default="model")

    for name in ("optimize", "deploy"):
        c = model_cmd(name, "print the vdim report and write an execution plan")
        c.add_argument("--vdims", default="", help="e.g. '#0=true,#1=8'")
        c.add_argument("--out", "-o", required=(name == "deploy"), help="plan file to write")
        c.add_argument("--weights-out", help="weight container (default: plan path with .solw)")
        tuning_flags(c)

    c = model_cmd("tune", "tune every layer and write the report")
    tuning_flags(c)
    c.add_argument("--report", help="output path; .csv selects CSV (default: text to stdout)")

    c = model_cmd("memory", "estimate peak memory")
    c.add_argument("--batch", type=int, help="override the batch extent (symbol #0)")
    c.add_argument("--align", type=int, default=64)
    c.add_argument("--format", choices=("block", "text", "csv"), default="block")
    c.add_argument("--version", choices=("inference", "training"), default="inference",
                   help="timeline shown by --format text/csv")
    tuning_flags(c)

    for name in ("run", "exec"):
        c = sub.add_parser(name, help="execute a plan")
        c.add_argument("plan")
        c.add_argument("--input", required=True, help="input tensors (.solw)")
        c.add_argument("--output", help="output tensors (.solw)")
        c.add_argument("--weights", help="weight container (default: plan path with .solw)")
        c.add_argument("--device", choices=("host", "offload"), default="host")
        c.add_argument("--repeat", type=int, default=1, help="run the plan this many times")

    c = model_cmd("train", "train with L1 loss and SGD")
    c.add_argument("--data", required=True, help="container with the input tensor(s) and 'target'")
    c.add_argument("--epochs", type=int, default=10)
    c.add_argument("--lr", type=float, default=0.01)
    c.add_argument("--out", required=True, help="trained weights (.solw)")
    c.add_argument("--device", choices=("host", "offload"), default="host")
    tuning_flags(c)
    return p


def _cost(args):
    spec = getattr(args, "cost_model", None)
    if spec is None:
        return Measured()
    if spec == "ref":
        return Injected({}, strict=False)
    with open(spec, encoding="utf-8") as f:
        return load_cost_csv(f.read())


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _write(path, data: bytes):
    with open(path, "wb") as f:
        f.write(data)


def _weights_path(plan_path, explicit=None):
    return explicit or os.path.splitext(plan_path)[0] + ".solw"


def _cmd_inspect(args, out):
    g = ingest.load_model(args.model, materialize=False)
    out.write(ingest.format_summary(g, args.name))


def _cmd_optimize(args, out):
    from minisol import optimize

    binding = vdims_flag_parse(args.vdims)
    m = optimize(args.model, vdims=binding, cost=_cost(args), training=False)
    out.write(m.report.render())
    if args.out:
        _write(args.out, m.inference.to_bytes())
        wpath = _weights_path(args.out, args.weights_out)
        _write(wpath, ingest.save_weights(m.weight_store()))
        out.write(f"wrote {args.out} and {wpath}\n")


def _cmd_tune(args, out):
    from minisol.backends import tune

    g, _ = passes.run_pipeline(ingest.load_model(args.model))
    a = tune(g, _cost(args))
    if args.report:
        text = a.report_csv() if args.report.endswith(".csv") else a.report()
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        out.write(a.report())


def _cmd_memory(args, out):
    from minisol import optimize

    binding = {0: args.batch} if args.batch else None
    m = optimize(args.model, vdims=binding, cost=_cost(args))
    if args.format in ("block", "text"):
        out.write(m.memory_block(args.align))
    if args.format == "block":
        return
    if args.version == "training" and m.trainable:
        tl = schedule.training_timeline(m.train_fwd, m.train_bwd, args.align)
    else:
        tl = schedule.timeline(m.inference, args.align)
    out.write(schedule.memory_report(tl, "csv" if args.format == "csv" else "text"))


def _cmd_run(args, out):
    from minisol.runtime import HostModel, OffloadDevice, execute, sync_stats

    plan = ExecutionPlan.from_bytes(_read(args.plan))
    weights = ingest.load_weights(_read(_weights_path(args.plan, args.weights)))
    missing = [w for w in plan.weights if w not in weights]
    if missing:
        raise KeyError(f"weight container lacks {missing[0]!r}")
    inputs = ingest.load_weights(_read(args.input))
    model = HostModel(weights)
    device = OffloadDevice() if args.device == "offload" else None
    if args.repeat < 1:
        raise UsageError("--repeat must be at least 1")
    outputs = None
    for i in range(1, args.repeat + 1):
        before = sync_stats(device) if device else None
        outputs = execute(plan, dict(inputs), model, device)
        if device:
            after = sync_stats(device)
            out.write(f"run {i}: weight_sync_bytes={after.weight_bytes - before.weight_bytes} "
                      f"h2d_bytes={after.h2d_bytes - before.h2d_bytes} "
                      f"d2h_bytes={after.d2h_bytes - before.d2h_bytes}\n")
        else:
            out.write(f"run {i}: ok\n")
    if args.output:
        _write(args.output, ingest.save_weights(ingest.WeightStore(outputs)))
    for name, arr in outputs.items():
        out.write(f"{name} {list(arr.shape)}\n")


def _cmd_train(args, out):
    from minisol import optimize
    from minisol.runtime import OffloadDevice

    data = ingest.load_weights(_read(args.data))
    if "target" not in data:
        raise KeyError("data container needs a 'target' tensor")
    m = optimize(args.model, cost=_cost(args))
    if not m.trainable:
        raise ValueError("model has no training versions")
    inputs = {k: data[k] for k in m.train_fwd.input_names}
    device = OffloadDevice() if args.device == "offload" else None
    for epoch in range(1, args.epochs + 1):
        r = m.train_step((inputs, data["target"]), args.lr, device)
        out.write(f"epoch {epoch}: loss {r.loss:.6g}\n")
    _write(args.out, ingest.save_weights(m.weight_store()))


COMMANDS = {
    "inspect": _cmd_inspect,
    "optimize": _cmd_optimize,
    "deploy": _cmd_optimize,
    "tune": _cmd_tune,
    "memory": _cmd_memory,
    "run": _cmd_run,
    "exec": _cmd_run,
    "train": _cmd_train,
}

DATA_ERRORS = (
    ingest.IngestError, ingest.WeightFormatError, PlanFormatError, ShapeMismatch, UnboundVdim,
    passes.ShapeError, passes.UnknownSymbol, passes.IllegalOverride, OSError, KeyError, ValueError,
)


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        stderr.write(parser.format_usage())
        stderr.write(f"minisol: error: {e}\n")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=stderr)
    try:
        COMMANDS[args.command](args, stdout)
    except UsageError as e:
        stderr.write(f"minisol {args.command}: error: {e}\n")
        return 1
    except DATA_ERRORS as e:
        stderr.write(f"minisol {args.command}: {type(e).__name__}: {e}\n")
        return 2
    return 0


def _entry():
    sys.exit(main())


if __name__ == "__main__":
    _entry()
