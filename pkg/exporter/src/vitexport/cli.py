"""One-shot command line: run an export job file."""

from __future__ import annotations

import argparse
import json
import sys

from .jobs import ExportJob, run_job


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vitexport",
        description="Convert a ViT checkpoint into the interchange format and "
                    "optionally record golden embedding fixtures.",
    )
    parser.add_argument("job", help="JSON job file")
    args = parser.parse_args(argv)
    try:
        job = ExportJob.from_file(args.job)
        report = run_job(job)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
