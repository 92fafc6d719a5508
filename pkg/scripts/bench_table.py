"""Print the benchmark table (all optimization levels) and save it under reports/."""

import sys
from pathlib import Path

from purevm import bench as B


def main():
    rows = []
    for backend in ("REWINDING", "JUST_IN_TIME"):
        for name in B.BENCHMARKS:
            spec = B.benchmark(name)
            rows += B.compare_optimizations(spec, spec.config.replace(vm_backend=backend),
                                            backend=backend)
    text = B.render_rows(rows)
    sys.stdout.write(text)
    out = Path(__file__).resolve().parent.parent / "reports" / "bench.txt"
    out.parent.mkdir(exist_ok=True)
    out.write_text(text)
    return 0 if all(r.result == "PASS" for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
