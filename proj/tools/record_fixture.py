#!/usr/bin/env python3
"""Re-record tests/data/llm_replay against a scripted local chat server.

usage: tools/record_fixture.py build/cosine
"""
import json
import pathlib
import shutil
import subprocess
import sys
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "tests" / "data" / "llm_replay"


def lib(msg, upd):
    t = lambda name, e: {"name": name, "expr": e, "type": "vector"}
    return json.dumps({"message_terms": [t(*m) for m in msg], "update_terms": [t(*u) for u in upd]})


# One reply per request, in order. The second is chatty prose, which the
# proposer rejects and asks again for.
REPLIES = [
    lib([("diff", "xj - xi"), ("prod", "xi * xj")], [("x", "x"), ("h", "h")]),
    "Happy to help! I would drop prod and normalise by degree.",
    lib([("diff", "xj - xi")], [("x", "x"), ("h", "h"), ("hdeg", "h / (deg + 1e-6)")]),
    "```json\n" + lib([("diff", "xj - xi"), ("src", "xj")], [("h", "h"), ("hdeg", "h / (deg + 1e-6)")]) + "\n```",
]

CONFIG = {
    "dataset": {
        "graph": {"family": "er", "nodes": 8, "p": 0.3},
        "system": {"kind": "diff", "trajectories": 8, "steps": 8},
    },
    "train": {"epochs": 80},
    "evolve": {
        "proposer": "llm",
        "rounds": 3,
        "patience": 3,
        "description": "heat spreading between neighbouring nodes",
        "llm": {"token_env": "", "fallback": False},
    },
    "seed": 5,
}


class Handler(BaseHTTPRequestHandler):
    served = 0

    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        i = Handler.served
        Handler.served += 1
        body = json.dumps({"choices": [{"message": {"role": "assistant", "content": REPLIES[i]}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def main():
    binary = sys.argv[1]
    server = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    cfg = json.loads(json.dumps(CONFIG))
    cfg["evolve"]["llm"]["endpoint"] = f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = pathlib.Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
        out = pathlib.Path(tmp) / "out"
        subprocess.run([binary, "evolve", "--config", str(cfg_path), "--out", str(out)], check=True)
        server.shutdown()
        if Handler.served != len(REPLIES):
            sys.exit(f"expected {len(REPLIES)} requests, served {Handler.served}")
        shutil.rmtree(FIXTURE, ignore_errors=True)
        (FIXTURE / "transcripts").mkdir(parents=True)
        for f in sorted((out / "transcripts").glob("round_*.json")):
            shutil.copy(f, FIXTURE / "transcripts" / f.name)
        del cfg["evolve"]["llm"]["endpoint"]
        (FIXTURE / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    print(f"recorded {Handler.served} exchanges into {FIXTURE}")


if __name__ == "__main__":
    main()
