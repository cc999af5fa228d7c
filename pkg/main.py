import sys

from fedgala.cli import cli_main


def main() -> None:
    # 不带参数时跑一次桌面规模的默认实验
    argv = sys.argv[1:] or ["run", "--config", "samples/desk.cfg", "--out", "out"]
    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
