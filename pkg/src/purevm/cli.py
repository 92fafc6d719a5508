"""Command-line entry point: check, compile, run, crashfuzz, bench, report.

Exit codes: 0 success, 1 verification failure (type error, oracle
mismatch, failed fuzz run), 2 usage or configuration error.  Data goes to
stdout (or ``-o``), diagnostics to stderr.
"""

import argparse
import functools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench as B
from . import cir
from . import frontend as fe
from . import lowering as lw
from . import powersim as P
from . import types as ty
from . import vm as V
from .errors import ConfigError, PureVMError

OPT_NAMES = {"none": frozenset(), "fusion": frozenset({"BLOCK_FUSION"}),
             "loop": frozenset({"LOOP_OPT"}),
             "fusion+loop": frozenset({"BLOCK_FUSION", "LOOP_OPT"})}


class UsageError(PureVMError):
    exit_code = 2


# --- inputs ---------------------------------------------------------------------


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as e:
        raise UsageError("cannot read %s: %s" % (path, e.strerror)) from None


def _sibling(path, ext):
    p = Path(path).with_suffix(ext)
    return p if p.is_file() else None


def _config(args, src_path=None):
    """--config, else the sibling .vmcfg, else defaults."""
    path = getattr(args, "config", None)
    if path is None and src_path is not None:
        path = _sibling(src_path, ".vmcfg")
    cfg = fe.parse_config(_read_text(path)) if path else fe.VmConfig()
    kw = {}
    if getattr(args, "opt", None):
        kw["optimizations"] = _opts(args.opt)
    if getattr(args, "backend", None):
        kw["vm_backend"] = args.backend
    if getattr(args, "page_size", None):
        kw["page_size_bytes"] = args.page_size
    return cfg.replace(**kw) if kw else cfg


def _opts(text):
    out = set()
    for part in text.split(","):
        part = part.strip()
        if part in OPT_NAMES:
            out |= OPT_NAMES[part]
        elif part in ("BLOCK_FUSION", "LOOP_OPT"):
            out.add(part)
        else:
            raise UsageError("unknown optimization %r" % part)
    return frozenset(out)


def _inputs(args, src_path):
    """Interrupt script and sensor values: explicit flags, else siblings."""
    irq = args.irq or _sibling(src_path, ".irq")
    sensor = args.sensor or _sibling(src_path, ".sensor")
    interrupts = P.parse_interrupts(_read_text(irq)) if irq else []
    values = [float(x) for x in _read_text(sensor).split()] if sensor else []
    return interrupts, values


def _program(args):
    """Compile a .pl file or load a .cir container."""
    path = args.file
    if path.endswith(".cir"):
        cp = cir.load(path)
        if getattr(args, "backend", None):
            cp.cfg = cp.cfg.replace(vm_backend=args.backend)
        elif getattr(args, "config", None):
            cfg = fe.parse_config(_read_text(args.config))
            cp.cfg = cp.cfg.replace(vm_backend=cfg.vm_backend)
        return cp
    cfg = _config(args, path)
    return lw.compile_source(_read_text(path), cfg, Path(path).name, _defines(args))


def _defines(args):
    out = {}
    for d in getattr(args, "define", None) or []:
        name, sep, val = d.partition("=")
        if not sep:
            raise UsageError("--define expects name=value")
        try:
            out[name] = int(val, 0)
        except ValueError:
            try:
                out[name] = float(val)
            except ValueError:
                raise UsageError("bad --define value %r" % val) from None
    return out


def _seed(args):
    env = os.environ.get("PUREVM_SEED")
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError("PUREVM_SEED must be an integer") from None
    return args.seed


def _out(args, text):
    if getattr(args, "output", None):
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


# --- subcommands ----------------------------------------------------------------


def cmd_check(args):
    tp = ty.check_source(_read_text(args.file), Path(args.file).name)
    _out(args, "".join(tp.signature(n) + "\n" for n in tp.user_names))
    return 0


def cmd_compile(args):
    cp = lw.compile_source(_read_text(args.file), _config(args, args.file),
                           Path(args.file).name, _defines(args))
    if args.output:
        cir.save(args.output, cp, Path(args.file).name)
    if args.emit_text or not args.output:
        sys.stdout.write(lw.render_listing(cp))
    return 0


def _driver(args, interrupts, cp):
    if args.power == "continuous":
        return P.continuous(interrupts)
    if args.power == "schedule":
        steps = [int(x) for x in (args.crash_at or "").split(",") if x.strip()]
        if not steps:
            raise UsageError("--power schedule needs --crash-at")
        return P.schedule(steps, interrupts)
    model = P.EnergyModel()
    if args.harvest:
        model = P.EnergyModel(harvest=P.parse_trace(_read_text(args.harvest)))
    return P.energy(model, interrupts, cp.cfg.words_per_page)


def cmd_run(args):
    cp = _program(args)
    interrupts, values = _inputs(args, args.file)
    env = V.Environment(sensor=values)
    h = V.VM(cp, env=env, checked=args.checked, trace=args.trace).boot()
    rep = h.run_until_idle(_driver(args, interrupts, cp))
    if args.trace:
        sys.stdout.write("".join(line + "\n" for line in h.trace))
    sys.stdout.write(rep.to_text())
    if args.dump_nvm:
        Path(args.dump_nvm).write_bytes(h.mem.dump())
    if args.verify:
        want = V.VM(cp, backend="TEST", env=V.Environment(sensor=values)).boot() \
            .run_until_idle(P.continuous(interrupts))
        if want.values() != rep.values() or want.globals != rep.globals:
            print("purevm: run does not match the TestVM oracle", file=sys.stderr)
            return 1
    return 0


def _fuzz_worker(cp, interrupts, values, exhaustive, budget, memo, predicate, name,
                 backend, seeds, seed_base, ks):
    env_factory = functools.partial(V.Environment, sensor=values)
    if exhaustive:
        return P.exhaustive_single_crash(cp, interrupts, budget, env_factory, memo,
                                         predicate, name, ks=ks)
    return P.random_crash_fuzz(cp, seeds, interrupts, backend, env_factory, predicate, name,
                               check_trace=(backend == "JUST_IN_TIME") or None,
                               seed_base=seed_base)


def _chunks(items, n):
    return [items[i::n] for i in range(n) if items[i::n]]


def cmd_crashfuzz(args):
    cp = _program(args)
    interrupts, values = _inputs(args, args.file)
    name = Path(args.file).stem.upper()
    predicate = P.NeverAll(tuple(args.never.split(","))) if args.never else None
    if predicate is not None:
        missing = [n for n in predicate.names if n not in cp.globals]
        if missing:
            raise UsageError("unknown global(s) for --never: %s" % ", ".join(missing))
    backend = cp.cfg.vm_backend
    jobs = max(1, args.jobs or os.cpu_count() or 1)
    if args.exhaustive:
        if backend != "REWINDING":
            raise UsageError("--exhaustive uses the REWINDING backend")
        ref = V.VM(cp, backend="REWINDING", env=V.Environment(sensor=values)).boot() \
            .run_until_idle(P.continuous(interrupts))
        work = _chunks(list(range(1, min(args.budget, ref.steps) + 1)), jobs)
        calls = [(cp, interrupts, values, True, args.budget, not args.no_memo, predicate,
                  name, backend, None, 0, ks) for ks in work]
    else:
        seeds = list(range(args.seeds))
        calls = [(cp, interrupts, values, False, args.budget, False, predicate, name, backend,
                  chunk, _seed(args), None) for chunk in _chunks(seeds, jobs)]
    if jobs == 1 or len(calls) <= 1:
        parts = [_fuzz_worker(*c) for c in calls]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(calls))) as pool:
            parts = list(pool.map(_fuzz_worker, *zip(*calls)))
    if not parts:
        raise UsageError("nothing to fuzz")
    rep = P.merge_reports(parts, name, backend)
    sys.stdout.write(rep.to_text())
    print("purevm: fuzzing took %.1fs" % rep.seconds, file=sys.stderr)
    return 0 if rep.ok else 1


def _bench_names(args):
    names = [n.upper() for n in (args.name or B.BENCHMARKS)]
    for n in names:
        if n not in B.CORPUS:
            raise UsageError("unknown benchmark %r" % n)
    return names


def cmd_bench(args):
    levels = B.OPT_LEVELS
    if args.opt:
        levels = tuple((o, _opts(o)) for o in args.opt.split(";"))
    rows = []
    for n in _bench_names(args):
        spec = B.benchmark(n, truncated=args.truncated)
        cfg = spec.config.replace(vm_backend=args.backend) if args.backend else spec.config
        rows += B.compare_optimizations(spec, cfg, levels, cfg.vm_backend)
    _out(args, B.render_rows(rows))
    return 0 if all(r.result == "PASS" for r in rows) else 1


def cmd_report(args):
    sizes = tuple(int(x) for x in args.sizes.split(","))
    ok = True
    text = []
    for n in _bench_names(args):
        spec = B.benchmark(n, truncated=args.truncated)
        rows = B.page_size_report(spec, sizes)
        same = all(r["outputs"] == rows[0]["outputs"] and r["globals"] == rows[0]["globals"]
                   for r in rows)
        ok = ok and same
        body = B.render_page_size_report(n, rows) + "outputs_identical = %s\n" % same
        if args.output_dir:
            d = Path(args.output_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / ("%s_pages.txt" % n.lower())).write_text(body)
        text.append(body)
    sys.stdout.write("\n".join(text))
    return 0 if ok else 1


# --- argument parsing ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="purevm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cfg_flags(sp):
        sp.add_argument("--config", help=".vmcfg file (default: sibling of the source)")
        sp.add_argument("--opt", help="comma list: none, fusion, loop, fusion+loop")
        sp.add_argument("--backend", choices=("TEST", "REWINDING", "JUST_IN_TIME"))
        sp.add_argument("--page-size", type=int)
        sp.add_argument("--define", action="append", metavar="NAME=VALUE",
                        help="override a global's initial value")

    def io_flags(sp):
        sp.add_argument("--irq", help="interrupt script (default: sibling .irq)")
        sp.add_argument("--sensor", help="sensor values (default: sibling .sensor)")

    sp = sub.add_parser("check", help="type-check and print signatures")
    sp.add_argument("file")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("compile", help="compile to a .cir container")
    sp.add_argument("file")
    cfg_flags(sp)
    sp.add_argument("-o", "--output")
    sp.add_argument("--emit-text", action="store_true", help="print the block listing")
    sp.set_defaults(fn=cmd_compile)

    sp = sub.add_parser("run", help="run a .pl or .cir program")
    sp.add_argument("file")
    cfg_flags(sp)
    io_flags(sp)
    sp.add_argument("--power", choices=("continuous", "schedule", "energy"),
                    default="continuous")
    sp.add_argument("--crash-at", help="comma list of crash steps (schedule mode)")
    sp.add_argument("--harvest", help="harvest trace for energy mode")
    sp.add_argument("--trace", action="store_true", help="print one line per micro-step")
    sp.add_argument("--checked", action="store_true", help="check value tags at run time")
    sp.add_argument("--dump-nvm", metavar="PATH")
    sp.add_argument("--verify", action="store_true", help="compare with the TestVM oracle")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("crashfuzz", help="crash-consistency fuzzing")
    sp.add_argument("file")
    cfg_flags(sp)
    io_flags(sp)
    sp.add_argument("--exhaustive", action="store_true", help="one crash at every step")
    sp.add_argument("--budget", type=int, default=100_000)
    sp.add_argument("--seeds", type=int, default=1000, help="random energy traces")
    sp.add_argument("--seed", type=int, default=0, help="seed base (PUREVM_SEED overrides)")
    sp.add_argument("--jobs", type=int, default=0, help="worker processes (default: CPUs)")
    sp.add_argument("--no-memo", action="store_true")
    sp.add_argument("--never", metavar="A,B", help="Bool globals never all true at commits")
    sp.set_defaults(fn=cmd_crashfuzz)

    sp = sub.add_parser("bench", help="benchmark table across optimization levels")
    sp.add_argument("--name", action="append", help="BC, CF, AR, SENSE, WAR or ALARM")
    sp.add_argument("--opt", help="';'-separated levels, each a comma list")
    sp.add_argument("--backend", choices=("TEST", "REWINDING", "JUST_IN_TIME"))
    sp.add_argument("--truncated", action="store_true")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("report", help="page-size counter report")
    sp.add_argument("--name", action="append")
    sp.add_argument("--sizes", default="16,32,64,128")
    sp.add_argument("--truncated", action="store_true")
    sp.add_argument("--output-dir")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.fn(args)
    except ConfigError as e:
        print("purevm: %s" % e, file=sys.stderr)
        return 2
    except PureVMError as e:
        print("purevm: %s" % e, file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print("purevm: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
