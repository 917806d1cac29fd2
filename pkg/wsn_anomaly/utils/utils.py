import hashlib
import json
import random
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np
import torch


def array_hash(*arrays: np.ndarray) -> str:
    """
    SHA-256 over dtype, shape and raw bytes of the given arrays.
    """
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode("utf-8"))
        digest.update(str(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def tensor_hash(tensors: Iterable[torch.Tensor]) -> str:
    return array_hash(*(t.detach().cpu().contiguous().numpy() for t in tensors))


def derive_seed(*parts: int) -> int:
    """
    Fold several integers into one 32-bit seed, independent of call order elsewhere.
    """
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(seq.generate_state(1)[0])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def write_jsonl(path: Path, records: Sequence[Any], append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if append else "w"
    with path.open(mode, encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> List[dict]:
    if not path.is_file():
        raise FileNotFoundError(f"JSONL file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
