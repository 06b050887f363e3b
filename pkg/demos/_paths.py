from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CWE = ROOT / "tests" / "cwe"
PROGRAMS = ROOT / "tests" / "programs"
