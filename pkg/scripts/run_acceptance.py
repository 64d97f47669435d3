"""Run the acceptance suite and print one line per criterion."""
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    cmd = [sys.executable, "-m", "pytest", "-q", os.path.join(ROOT, "tests", "test_acceptance.py"), *sys.argv[1:]]
    sys.exit(subprocess.call(cmd, cwd=ROOT))
