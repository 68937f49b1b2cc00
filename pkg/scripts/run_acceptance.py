"""Run the acceptance suite and print one PASS/FAIL line per criterion."""
import subprocess
import sys
from pathlib import Path

root = Path(__file__).resolve().parents[1]
proc = subprocess.run([sys.executable, "-m", "pytest", str(root / "tests" / "test_acceptance.py"), "-s", "-q",
                       "-p", "no:cacheprovider"], cwd=root, capture_output=True, text=True)
lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS ", "FAIL "))]
print("\n".join(lines) if lines else proc.stdout + proc.stderr)
sys.exit(proc.returncode)
