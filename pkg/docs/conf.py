from __future__ import annotations

import sys
from datetime import datetime
from pathlib import Path

# Ensure the ``src`` directory is on sys.path so Sphinx sees ``mutualattack``
REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

try:
    import mutualattack

    release = mutualattack.__version__
except Exception:  # pragma: no cover - docs build without torch installed
    release = "0.0.0"

project = "mutualattack"
copyright = f"{datetime.now():%Y}, mutualattack contributors"
author = "mutualattack contributors"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.napoleon",
    "sphinx.ext.autosectionlabel",
    "sphinx_autodoc_typehints",
    "sphinx.ext.mathjax",
]

# torch-heavy optional backends are not needed to render signatures
autodoc_mock_imports = ["open_clip", "transformers", "matplotlib"]

autosectionlabel_prefix_document = True

templates_path = ["_templates"]
exclude_patterns: list[str] = ["_build", "Thumbs.db", ".DS_Store"]

html_theme = "alabaster"
html_theme_options = {
    "description": "Universal perturbations against a prompt that fights back",
    "sidebar_collapse": False,
}
