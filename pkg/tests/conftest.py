"""Shared fixtures."""

from collections.abc import Callable
from pathlib import Path

import pytest

from .helpers import write_toy_clip


@pytest.fixture
def make_corpus(tmp_path: Path) -> Callable[..., Path]:
    """Factory writing toy clips plus a manifest; returns the manifest path."""

    def factory(
        clips: int = 2,
        frames: int = 5,
        width: int = 128,
        height: int = 64,
        qp: int = 32,
        name: str = "manifest.txt",
    ) -> Path:
        lines = []
        for c in range(clips):
            clip = f"clip{c}"
            write_toy_clip(tmp_path, clip, frames, width, height, seed=c)
            lines.append(f"{clip}.orig.yuv {clip}.dec.yuv {clip}.bpart {qp} {width} {height} {frames}")
        manifest = tmp_path / name
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest

    return factory
