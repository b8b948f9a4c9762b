#!/usr/bin/env python3
"""
files.py
========

出力ファイルの置き換え書き込み。一時ファイルに書いてから os.replace するので、
途中で落ちても既存ファイルは壊れない。
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

PathLike = Union[str, Path]


@contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """
    一時ファイルのパスを渡し、ブロックを正常に抜けたら path へ置き換える。
    例外で抜けたときは一時ファイルを消して path には触らない。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: PathLike, text: str) -> Path:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as fp:
            fp.write(text)
    return Path(path)
