"""Run every benchmark at page sizes 16/32/64/128, check the outputs agree,
and archive the counter reports for 32 and 64 byte pages under reports/."""

import argparse
import sys
from pathlib import Path

from purevm import bench as B

ARCHIVED = (32, 64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "reports"))
    ap.add_argument("--truncated", action="store_true")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_size = {s: [] for s in ARCHIVED}
    ok = True
    for name in B.BENCHMARKS:
        rows = B.page_size_report(B.benchmark(name, truncated=args.truncated))
        same = all(r["outputs"] == rows[0]["outputs"] and r["globals"] == rows[0]["globals"]
                   for r in rows)
        ok &= same
        print(B.render_page_size_report(name, rows) + "outputs_identical = %s\n" % same)
        for r in rows:
            if r["page_size"] in per_size:
                per_size[r["page_size"]].append((name, r))
    for size, items in per_size.items():
        lines = ["# counters at page size %d bytes" % size,
                 "%-6s %9s %12s %10s %8s %8s %8s %8s" % ("name", "commits", "page_copies",
                                                        "steps", "useful", "undo", "stack",
                                                        "consume")]
        for name, r in items:
            s = r["split"]
            lines.append("%-6s %9d %12d %10d %8d %8d %8d %8d" % (
                name, r["commits"], r["page_copies"], r["steps"], s.useful_primitive_steps,
                s.undo_log_steps, s.stack_op_steps, s.consume_commit_steps))
        path = out / ("page_size_%d.txt" % size)
        path.write_text("\n".join(lines) + "\n")
        print("wrote", path, file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
