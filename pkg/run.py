import sys

import click
from dotenv import load_dotenv

from app import create_app
from app.errors import PlannerError

# load environment variables from .env file
load_dotenv()


def main(argv=None):
    """
    Runs one planner command and returns its exit code:
    0 success, 2 bad input or parameters, 3 infeasible, 4 solver unavailable, 1 anything else.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        app = create_app()
        with app.app_context():
            code = app.cli.main(args=argv, prog_name="planner", standalone_mode=False)
    except PlannerError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except Exception as e:
        click.echo(f"error: unexpected {type(e).__name__}: {e}", err=True)
        return 1
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
