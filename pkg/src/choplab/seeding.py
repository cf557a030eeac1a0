"""Labelled seed derivation.

All randomness comes from one top-level seed. A sub-stream is keyed by a
label such as ``"taskgen/type2/idx17"``: the first 16 bytes of
``sha256(f"{seed}/{label}")`` form the 128-bit key of a Philox4x64-10
counter-based generator (numpy's ``Philox``: 4x64-bit counter, 2x64-bit
key, 10 rounds, multipliers 0xD2E7470EE14C6C93 / 0xCA5A826395121157).
"""

import hashlib

import numpy as np


def derive_key(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, label)))


def sub_seed(seed: int, label: str) -> int:
    return derive_key(seed, label) & 0x7FFF_FFFF
