#!/usr/bin/env python3
"""
Documentation gate: README and DESIGN present, and every module under
core/ and stages/ opens with a docstring (or a documented first definition).
"""

import ast
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
REQUIRED_DOCS = ("README.md", "DESIGN.md", "docs/ARCHITECTURE.md")
PACKAGES = ("core", "stages")


def check_required_docs(root: Path = ROOT) -> list[str]:
    problems = []
    for name in REQUIRED_DOCS:
        path = root / name
        if not path.exists():
            problems.append(f"{name} is missing")
        elif path.stat().st_size == 0:
            problems.append(f"{name} is empty")
    return problems


def module_documented(path: Path) -> bool:
    """True when the module, or its first class/function, carries a docstring."""
    tree = ast.parse(path.read_text(encoding="utf-8"))
    if ast.get_docstring(tree) is not None:
        return True
    first = tree.body[0] if tree.body else None
    if isinstance(first, (ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
        return ast.get_docstring(first) is not None
    return False


def undocumented_modules(root: Path = ROOT) -> list[Path]:
    missing = []
    for package in PACKAGES:
        for path in sorted((root / package).glob("*.py")):
            if path.name != "__init__.py" and not module_documented(path):
                missing.append(path.relative_to(root))
    return missing


def check_docs(root: Path = ROOT) -> bool:
    problems = check_required_docs(root)
    problems += [f"no docstring in {path}" for path in undocumented_modules(root)]
    for problem in problems:
        print(f"FAIL {problem}")
    if not problems:
        print("documentation check passed")
    return not problems


if __name__ == "__main__":
    sys.exit(0 if check_docs() else 1)
