#!/usr/bin/env python3
"""Validate shipped data files and CLI reports against data/schemas."""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import jsonschema


def main() -> int:
    if len(sys.argv) != 3:
        print("usage: validate_schemas.py <data-dir> <bubbletree_cli>", file=sys.stderr)
        return 2
    data, cli = Path(sys.argv[1]), sys.argv[2]
    schemas = {p.name.removesuffix(".schema.json"): json.loads(p.read_text())
               for p in (data / "schemas").glob("*.schema.json")}
    failures = 0

    def check(doc, schema, label):
        nonlocal failures
        errors = list(jsonschema.Draft202012Validator(schemas[schema]).iter_errors(doc))
        for e in errors:
            print(f"FAIL {label}: {'/'.join(map(str, e.absolute_path))}: {e.message}")
        failures += bool(errors)
        if not errors:
            print(f"ok   {label} ({schema})")

    for p in sorted((data / "families").glob("*.json")):
        check(json.loads(p.read_text()), "family", p.name)
    for p in sorted((data / "instanton").glob("*.json")):
        check(json.loads(p.read_text()), "instanton_config", p.name)
    for p in sorted((data / "scan").glob("*.json")):
        check(json.loads(p.read_text()), "scan_config", p.name)

    runs = [
        ("instanton_report", ["instanton"]),
        ("instanton_report", ["instanton", "--config", str(data / "instanton/flat.json")]),
        ("scan_report", ["scan", "--config", str(data / "scan/rotation.json")]),
        ("extract_report", ["extract", "--config", str(data / "families/pair.json")]),
        ("check_report", ["check"]),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        for i, (schema, args) in enumerate(runs):
            out = Path(tmp) / str(i)
            proc = subprocess.run([cli, *args, "--out", str(out)], capture_output=True, text=True)
            if proc.returncode not in (0, 2):
                print(f"FAIL {' '.join(args)}: exit {proc.returncode}: {proc.stderr.strip()}")
                failures += 1
                continue
            check(json.loads(proc.stdout), schema, " ".join(args[:1]) + " report")
            if (out / "ideal.json").exists():
                ideal = json.loads((out / "ideal.json").read_text())
                check(ideal, "ideal_connection", "ideal.json")
        tree = subprocess.run([cli, "extract", "--config", str(data / "families/single.json")],
                              capture_output=True, text=True)
        check(json.loads(tree.stdout)["ideal"], "ideal_connection", "inline ideal")

    for p in sorted((data / "families").glob("*.json")):
        check(json.loads(p.read_text())["tree"], "gluing_tree", p.name + " tree")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
