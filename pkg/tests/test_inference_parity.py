"""The evaluation path must not depend on the counterfactual module."""

import ast
import subprocess
import sys
import textwrap
from pathlib import Path

import pytest

import cal
from cal.cli import main

PACKAGE = Path(cal.__file__).parent
EVAL_MODULES = ["cal.metrics", "cal.model", "cal.checkpoint", "cal.visualize", "cal.synthdata", "cal.tensor", "cal.cli"]


def module_path(name: str) -> Path:
    rel = Path(*name.split(".")[1:])
    pkg = PACKAGE / rel / "__init__.py"
    return pkg if pkg.exists() else (PACKAGE / rel).with_suffix(".py")


def resolve(importer: str, node: ast.ImportFrom) -> str:
    if node.level == 0:
        return node.module or ""
    parts = importer.split(".")
    is_pkg = module_path(importer).name == "__init__.py"
    base = parts if is_pkg else parts[:-1]
    base = base[: len(base) - (node.level - 1)]
    return ".".join(base + ([node.module] if node.module else []))


def top_level_imports(name: str) -> set[str]:
    """Imports executed when the module is imported (function bodies excluded)."""
    tree = ast.parse(module_path(name).read_text())
    found = set()

    def visit(body):
        for node in body:
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.Lambda)):
                continue
            if isinstance(node, ast.Import):
                found.update(a.name for a in node.names)
            elif isinstance(node, ast.ImportFrom):
                target = resolve(name, node)
                found.add(target)
                found.update(f"{target}.{a.name}" for a in node.names)
            for field in ("body", "orelse", "finalbody", "handlers"):
                visit(getattr(node, field, []) or [])

    visit(tree.body)
    return {m for m in found if m.startswith("cal") and module_path(m).exists()}


def closure(start: str) -> set[str]:
    seen, stack = set(), [start]
    while stack:
        m = stack.pop()
        if m in seen:
            continue
        seen.add(m)
        stack.extend(top_level_imports(m))
    return seen


@pytest.mark.parametrize("module", EVAL_MODULES)
def test_import_closure_excludes_counterfactual(module):
    reached = closure(module)
    assert "cal.counterfactual" not in reached
    assert "cal.train" not in reached


def test_eval_commands_import_nothing_counterfactual():
    tree = ast.parse(module_path("cal.cli").read_text())
    for fn in (n for n in tree.body if isinstance(n, ast.FunctionDef) and n.name in ("cmd_eval", "cmd_visualize", "cmd_gen")):
        for node in ast.walk(fn):
            if isinstance(node, ast.ImportFrom):
                assert resolve("cal.cli", node) not in ("cal.counterfactual", "cal.train", "cal.ablation")


def test_eval_runs_with_counterfactual_module_blocked(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    gen = ["gen", "--classes", "3", "--samples-per-class", "3", "--image-size", "16", "--out", str(data)]
    assert main(gen) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "1", "--heads", "2", "--objective", "cal"]) == 0
    script = textwrap.dedent(
        f"""
        import sys

        class Block:
            def find_spec(self, name, path=None, target=None):
                if name in ("cal.counterfactual", "cal.train", "cal.ablation"):
                    raise ImportError(name + " is blocked")
                return None

        sys.meta_path.insert(0, Block())
        from cal.cli import main
        ckpt, data, out = {str(run / "checkpoint.calm")!r}, {str(data)!r}, {str(tmp_path / "eval")!r}
        assert main(["eval", "--checkpoint", ckpt, "--data", data, "--out", out]) == 0
        assert main(["visualize", "--checkpoint", ckpt, "--data", data, "--out", out]) == 0
        assert "cal.counterfactual" not in sys.modules
        print("ok")
        """
    )
    done = subprocess.run([sys.executable, "-c", script], check=False, capture_output=True, text=True, timeout=300)
    assert done.returncode == 0, done.stderr
    assert done.stdout.strip().endswith("ok")
