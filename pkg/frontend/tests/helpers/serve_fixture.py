"""Serve a fixture directory for the UI round-trip test."""

import sys

import uvicorn

from gsseg.service import create_app

if __name__ == "__main__":
    scene_root, port = sys.argv[1], int(sys.argv[2])
    uvicorn.run(create_app(scene_root), host="127.0.0.1", port=port,
                log_level="warning")
