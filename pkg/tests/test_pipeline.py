import importlib.util
from pathlib import Path

SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "run_pipeline.py"


def _load_script():
    spec = importlib.util.spec_from_file_location("run_pipeline", SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_defaults_cover_the_full_grid():
    args = _load_script().build_parser().parse_args([])
    assert (args.count, args.test_count, args.epochs) == (2000, 200, 40)
    assert args.seeds == [1, 2, 3]
    assert args.modes == ["baseline", "em", "msl"]


def test_grid_can_be_shrunk_from_the_command_line():
    args = _load_script().build_parser().parse_args(["--seeds", "1", "--count", "16", "--test-count", "8"])
    assert (args.seeds, args.count, args.test_count) == ([1], 16, 8)
