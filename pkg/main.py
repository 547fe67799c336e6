import sys


def main():
    # No arguments opens the desktop viewer; anything else goes to the CLI.
    if len(sys.argv) > 1:
        from core.cli import main as cli_main
        sys.exit(cli_main(sys.argv[1:]))

    from ui.main_window import launch_viewer
    sys.exit(launch_viewer())


if __name__ == "__main__":
    main()
