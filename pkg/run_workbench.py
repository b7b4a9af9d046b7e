"""
Single-file launcher for the Adaptive SNMPC Workbench.

    python run_workbench.py serve [--host H] [--port P]   start the HTTP API
    python run_workbench.py <train|eval|bench|stress|report> ...   run the CLI
"""
import sys
from pathlib import Path

# Add backend to Python path
backend_path = Path(__file__).parent / "backend"
sys.path.insert(0, str(backend_path))


def serve(argv):
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(prog="run_workbench.py serve")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)
    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == "serve":
        serve(sys.argv[2:])
    else:
        from app.cli import main

        sys.exit(main(sys.argv[1:]))
