"""Builds the wheel and installs consistent_evidence in editable mode.

Flags:
    -v      show the output of pip and build
    --test  also install the test dependencies (pytest)
"""

import glob
import importlib.util
import shutil
import subprocess
import sys

PACKAGE = "consistent_evidence"

RED = "\033[31m"
BLUE = "\033[34m"
GREEN = "\033[32m"
RESET = "\033[0m"


def paint(text: str, color: str = "") -> str:
    return f"{color}{text}{RESET}" if color else text


def remove_artifacts():
    """Deletes build/, dist/ and every *.egg-info directory left by the build"""
    for folder in ["build", "dist", *glob.glob("**/*.egg-info", recursive=True)]:
        print(f"Removing {folder}...")
        shutil.rmtree(folder, ignore_errors=True)


def pip(*args: str, **run_kwargs):
    cmd = [sys.executable, "-m", "pip", "install", "--disable-pip-version-check", *args]
    subprocess.run(cmd, **run_kwargs)


def install(with_tests: bool = False, verbose: bool = False):
    run_kwargs = dict(check=True, stdout=sys.stdout if verbose else subprocess.DEVNULL)
    target = ".[test]" if with_tests else "."

    try:
        if importlib.util.find_spec("build") is None:
            print("Installing the 'build' package...")
            pip("build", **run_kwargs)

        print("Building wheel...")
        subprocess.run([sys.executable, "-m", "build"], **run_kwargs)
        print(paint("Build completed.", GREEN))

        pip("-e", target, **run_kwargs)
        print(paint(f"Installed {target}.", GREEN))
        print(paint(f"Run with: {PACKAGE} --help", BLUE))
        if with_tests:
            print(paint('Fast tests: pytest -m "not slow"', BLUE))

    except subprocess.TimeoutExpired:
        print(paint("Installation error: timeout expired", RED))
    except (subprocess.CalledProcessError, OSError) as e:
        print(paint("\nInstallation failed:", RED))
        print(e.stderr if isinstance(e, subprocess.CalledProcessError) else e)
    finally:
        print("\nCleaning build artifacts...")
        remove_artifacts()


if __name__ == "__main__":
    flags = set(sys.argv[1:])
    install(with_tests="--test" in flags, verbose="-v" in flags)
