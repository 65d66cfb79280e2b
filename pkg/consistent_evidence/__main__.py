import sys

from consistent_evidence.harness.cli import run


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
