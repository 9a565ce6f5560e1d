"""Command-line interface.

Exit status is 0 on success, 1 on a usage error and 2 on a data or model
error. Options may also come from a ``key = value`` file given with
``--config``; flags on the command line take precedence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from crcir.errors import CodecError

log = logging.getLogger("crcir")

_COMMON = {"seed": 0, "threads": None, "log_level": "INFO"}

# per subcommand: option -> (default, type, help)
_OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "family": ("sphere", str, "surface family"),
        "points": (8192, int, "points per cloud"),
        "count": (1, int, "number of clouds; more than one writes <out>_NNN.ply"),
        "out": (None, str, "output PLY path"),
        "ascii": (False, bool, "write ascii PLY"),
        "rotate": (False, bool, "apply a random rotation"),
    },
    "train": {
        "data": (None, str, "directory of PLY files; omit to synthesise a corpus"),
        "shapes": (200, int, "synthetic corpus size"),
        "points": (8192, int, "points per synthetic shape"),
        "model": (None, str, "output model path"),
        "log": (None, str, "training log CSV"),
        "lmbda": (5e-3, float, "rate-distortion trade-off"),
        "stage1_steps": (2000, int, "distortion-only steps"),
        "stage1_lr": (1e-3, float, "stage 1 learning rate"),
        "stage2_steps": (1000, int, "rate-distortion steps"),
        "stage2_lr": (1e-4, float, "stage 2 learning rate"),
        "batch_size": (8, int, "clouds per step"),
    },
    "compress": {
        "in": (None, str, "input PLY"),
        "model": (None, str, "model file"),
        "rate": (30.0, float, "downsampling rate n/m"),
        "depth": (9, int, "coordinate bit depth"),
        "out": (None, str, "output .crc1 path"),
        "debug": (False, bool, "embed encoder-side digests"),
    },
    "decompress": {
        "model": (None, str, "model file"),
        "out": (None, str, "output PLY"),
        "up_rate": (None, int, "decode-side upsampling rate r'"),
        "base_only": (False, bool, "skip the learned refinement"),
        "ascii": (False, bool, "write ascii PLY"),
    },
    "upsample": {
        "model": (None, str, "model file"),
        "out": (None, str, "output PLY"),
        "factor": (2, int, "r' = factor * r"),
        "up_rate": (None, int, "explicit r' (overrides factor)"),
        "ascii": (False, bool, "write ascii PLY"),
    },
    "eval": {
        "ref": (None, str, "reference PLY"),
        "rec": (None, str, "reconstruction PLY"),
        "bitstream": (None, str, "bitstream for bpp accounting"),
        "error_map": (None, str, "write reconstruction with per-point error"),
        "peak": (None, float, "PSNR peak (default: reference bounding-box diagonal)"),
    },
    "rd-sweep": {
        "in": (None, str, "input PLY"),
        "model": (None, str, "model file"),
        "rates": ("48,30,24,20,15,12,10,8,6", str, "comma-separated downsampling rates"),
        "depth": (9, int, "coordinate bit depth"),
        "out": (None, str, "output CSV (default: stdout)"),
        "svg": (None, str, "optional SVG rendering of the curve"),
    },
}
_POSITIONAL = {"decompress": "bitstream", "upsample": "bitstream"}
_REQUIRED = {
    "synth": ("out",),
    "train": ("model",),
    "compress": ("in", "model", "out"),
    "decompress": ("bitstream", "model", "out"),
    "upsample": ("bitstream", "model", "out"),
    "eval": ("ref", "rec"),
    "rd-sweep": ("in", "model"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crcir", description="Two-layer point cloud geometry codec")
    p.add_argument("--config", help="key = value option file")
    sub = p.add_subparsers(dest="command")
    for cmd, opts in _OPTIONS.items():
        sp = sub.add_parser(cmd)
        if cmd in _POSITIONAL:
            sp.add_argument(_POSITIONAL[cmd], nargs="?")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--log-level", dest="log_level", default=None)
        for name, (_, typ, hlp) in opts.items():
            dest = name
            if typ is bool:
                sp.add_argument(_flag(name), dest=dest, action="store_const", const=True, default=None, help=hlp)
            else:
                sp.add_argument(_flag(name), dest=dest, type=typ, default=None, help=hlp)
    return p


def read_config_file(path) -> dict[str, str]:
    out = {}
    for i, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(value: str, typ):
    if typ is bool:
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        return typ(value)
    except ValueError:
        raise UsageError(f"bad value {value!r}") from None


def resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < command-line flags."""
    cmd = args.command
    opts = dict(_OPTIONS[cmd])
    opts.update({k: (v, type(v) if v is not None else (int if k == "threads" else str), "") for k, v in _COMMON.items()})
    if cmd in _POSITIONAL:
        opts[_POSITIONAL[cmd]] = (None, str, "")
    conf = {k: d for k, (d, _, _) in opts.items()}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k not in opts:
                raise UsageError(f"unknown option {k!r} in {args.config}")
            conf[k] = _coerce(v, opts[k][1])
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            conf[k] = v
    missing = [k for k in _REQUIRED[cmd] if conf.get(k) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): {', '.join(_flag(m) for m in missing)}")
    return conf


def _threads(conf) -> int:
    t = conf.get("threads")
    if t is None and os.environ.get("CRCIR_THREADS"):
        try:
            t = int(os.environ["CRCIR_THREADS"])
        except ValueError:
            raise UsageError("CRCIR_THREADS must be an integer") from None
    if t is None:
        t = os.cpu_count() or 1
    if t < 1:
        raise UsageError("thread count must be positive")
    return t


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_synth(c):
    import numpy as np

    from crcir.plyio import write_ply
    from crcir.synth import make_shape, random_sampler

    rng = np.random.default_rng(c["seed"])
    out = Path(c["out"])
    for i in range(c["count"]):
        sampler = random_sampler(rng, c["points"], c["family"])
        shape = make_shape(sampler, rng, rotate=c["rotate"])
        path = out if c["count"] == 1 else out.with_name(f"{out.stem}_{i:03d}{out.suffix}")
        write_ply(path, shape.points, binary=not c["ascii"])
        log.info("wrote %s (%s %s)", path, sampler.family, sampler.params)


def _load_clouds(c):
    from crcir.geometry import normalize_unit_cube
    from crcir.plyio import read_ply
    from crcir.synth import random_corpus

    if c["data"] is None:
        return [s.points for s in random_corpus(c["shapes"], c["points"], seed=c["seed"])]
    files = sorted(Path(c["data"]).glob("*.ply"))
    if not files:
        raise CodecError(f"no PLY files under {c['data']}")
    return [normalize_unit_cube(read_ply(f))[0] for f in files]


def _cmd_train(c):
    from crcir.training import TrainConfig, train

    cfg = TrainConfig(
        lmbda=c["lmbda"], stage1_steps=c["stage1_steps"], stage1_lr=c["stage1_lr"],
        stage2_steps=c["stage2_steps"], stage2_lr=c["stage2_lr"], batch_size=c["batch_size"], seed=c["seed"],
    )

    def progress(step, stage, out, elapsed):
        if step % 100 == 0:
            log.info("step %d stage %d distortion %.5f bits/pt %.4f (%.0fs)", step, stage,
                     out.distortion.item(), (out.bits_y + out.bits_z).item() / out.n_points, elapsed)

    model, _ = train(_load_clouds(c), cfg, log_path=c["log"], progress=progress)
    checksum = model.save(c["model"])
    log.info("saved %s (checksum %016x, %d parameters)", c["model"], checksum, model.parameter_count())


def _load_model(path):
    from crcir.model import CodecModel

    return CodecModel.load(path)


def _cmd_compress(c):
    from crcir.pipeline import CodecConfig, compress
    from crcir.plyio import read_ply

    data = compress(read_ply(c["in"]), _load_model(c["model"]), CodecConfig(c["rate"], c["depth"], c["debug"]))
    Path(c["out"]).write_bytes(data)
    n = len(read_ply(c["in"]))
    log.info("wrote %s: %d bytes, %.4f bpp", c["out"], len(data), 8 * len(data) / n)


def _decode(c, r_prime, refinement=True):
    from crcir.pipeline import decompress
    from crcir.plyio import write_ply

    pts = decompress(Path(c["bitstream"]).read_bytes(), _load_model(c["model"]), r_prime, refinement)
    write_ply(c["out"], pts, binary=not c["ascii"])
    log.info("wrote %s: %d points", c["out"], len(pts))


def _cmd_decompress(c):
    _decode(c, c["up_rate"], not c["base_only"])


def _cmd_upsample(c):
    from crcir.pipeline import Bitstream

    r_prime = c["up_rate"]
    if r_prime is None:
        r_prime = c["factor"] * Bitstream.from_bytes(Path(c["bitstream"]).read_bytes()).header.r
    _decode(c, r_prime)


def _cmd_eval(c):
    from crcir.metrics import MetricReport, bbox_diagonal, chamfer, p2plane_psnr, per_point_error
    from crcir.plyio import read_ply, write_ply

    ref, rec = read_ply(c["ref"]), read_ply(c["rec"])
    n_bytes = Path(c["bitstream"]).stat().st_size if c["bitstream"] else 0
    peak = c["peak"] or bbox_diagonal(ref)
    rep = MetricReport(chamfer(ref, rec), p2plane_psnr(ref, rec, peak), 8.0 * n_bytes / len(ref), len(ref),
                       Path(c["rec"]).name)
    print(MetricReport.csv_header())
    print(rep.csv_row())
    if c["error_map"]:
        write_ply(c["error_map"], rec, error=per_point_error(rec, ref))


def _cmd_rd_sweep(c):
    from crcir.pipeline import RDPoint, rd_sweep
    from crcir.plyio import read_ply

    try:
        rates = [float(r) for r in c["rates"].split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"bad rate list {c['rates']!r}") from None
    points = rd_sweep(read_ply(c["in"]), _load_model(c["model"]), rates, c["depth"])
    lines = [RDPoint.csv_header()] + [p.csv_row() for p in points]
    text = "\n".join(lines) + "\n"
    if c["out"]:
        Path(c["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    if c["svg"]:
        Path(c["svg"]).write_text(rd_svg(points))


def rd_svg(points, width: int = 480, height: int = 320) -> str:
    """Minimal SVG polyline of chamfer against bpp."""
    xs = [p.bpp for p in points]
    ys = [p.chamfer for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    pad = 40

    def sx(x):
        return pad + (x - x0) / ((x1 - x0) or 1) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / ((y1 - y0) or 1) * (height - 2 * pad)

    pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<polyline fill="none" stroke="black" points="{pts}"/>'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">bpp</text>'
        f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">chamfer</text>'
        "</svg>\n"
    )


_COMMANDS = {
    "synth": _cmd_synth, "train": _cmd_train, "compress": _cmd_compress, "decompress": _cmd_decompress,
    "upsample": _cmd_upsample, "eval": _cmd_eval, "rd-sweep": _cmd_rd_sweep,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(_COMMANDS))
        conf = resolve(args)
        level = getattr(logging, str(conf["log_level"]).upper(), None)
        if not isinstance(level, int):
            raise UsageError(f"unknown log level {conf['log_level']!r}")
        logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
        conf["threads"] = _threads(conf)
        import torch

        torch.set_num_threads(conf["threads"])
        log.info("resolved config: %s", " ".join(f"{k}={conf[k]}" for k in sorted(conf)))
        _COMMANDS[args.command](conf)
        return 0
    except UsageError as exc:
        print(f"crcir: usage error: {exc}", file=sys.stderr)
        return 1
    except (CodecError, OSError) as exc:
        print(f"crcir: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
