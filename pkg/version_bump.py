"""Bump the mutualattack version everywhere it is pinned.

Usage: python version_bump.py (major|minor|patch|rc) [--dry-run]
"""

import argparse
import re
import sys
from pathlib import Path

VERSION_RE = re.compile(r"^(\d+)\.(\d+)\.(\d+)(?:rc(\d+))?$")

# (file, anchored pattern, replacement template)
PINS = [
    (Path("pyproject.toml"), r'^version\s*=\s*".*?"', 'version = "{v}"'),
    (Path("src/mutualattack/__init__.py"), r'^__version__\s*=\s*".*?"', '__version__ = "{v}"'),
    (Path("recipe/meta.yaml"), r'^  version:\s*".*?"', '  version: "{v}"'),
]


def bump_version(current: str, part: str) -> str:
    """Next SemVer string; ``rc`` starts or continues a release candidate of the next patch."""
    match = VERSION_RE.match(current)
    if not match:
        raise ValueError(f"Invalid version format found: {current}")
    major, minor, patch = (int(x) for x in match.groups()[:3])
    rc = int(match.group(4)) if match.group(4) else None

    if part == "major":
        return f"{major + 1}.0.0"
    if part == "minor":
        return f"{major}.{minor + 1}.0"
    if part == "patch":
        return f"{major}.{minor}.{patch}" if rc is not None else f"{major}.{minor}.{patch + 1}"
    if part == "rc":
        return f"{major}.{minor}.{patch + 1}rc1" if rc is None else f"{major}.{minor}.{patch}rc{rc + 1}"
    raise ValueError(f"Unknown bump type: {part}. Use major/minor/patch/rc.")


def current_version(pyproject: Path) -> str:
    found = re.search(r'^version\s*=\s*"(.*?)"', pyproject.read_text(encoding="utf-8"), flags=re.MULTILINE)
    if not found:
        raise ValueError(f"no version line in {pyproject}")
    return found.group(1)


def rewrite(path: Path, pattern: str, replacement: str, dry_run: bool) -> bool:
    if not path.exists():
        print(f"Warning: {path} not found. Skipping.")
        return False
    content = path.read_text(encoding="utf-8")
    updated, count = re.subn(pattern, replacement, content, count=1, flags=re.MULTILINE)
    if count == 0:
        print(f"Warning: no version pin in {path}.")
        return False
    if not dry_run:
        path.write_text(updated, encoding="utf-8")
    return True


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("part", choices=["major", "minor", "patch", "rc"])
    parser.add_argument("--dry-run", action="store_true", help="Print the new version only")
    args = parser.parse_args(argv)

    pyproject = PINS[0][0]
    if not pyproject.exists():
        print("Error: pyproject.toml not found; run from the repository root.")
        return 1
    try:
        old = current_version(pyproject)
        new = bump_version(old, args.part)
    except ValueError as exc:
        print(f"Error: {exc}")
        return 1

    print(f"Bumping version: {old} -> {new}")
    updated = [str(path) for path, pattern, template in PINS
               if rewrite(path, pattern, template.format(v=new), args.dry_run)]
    print(("Would update: " if args.dry_run else "Updated: ") + ", ".join(updated))
    return 0


if __name__ == "__main__":
    sys.exit(main())
