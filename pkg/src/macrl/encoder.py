"""Frozen instruction encoders.

The default lookup encoder maps every phrase of a registered class to one
fixed random vector derived by seeded hashing of the class id; unregistered
phrases map to a designated unknown-phrase vector.  The external encoder
loads precomputed phrase -> vector maps (JSON) so real embeddings computed
offline can be probed without any language model in the loop.  Encoders are
frozen: embed() is deterministic and nothing here is ever updated.
"""

from __future__ import annotations

import json

import numpy as np

from .instructions import NULL_CLASS, InstructionRegistry


def _seeded_unit_vector(seed: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class LookupEncoder:
    """Class-lookup encoder: phrase -> fixed class vector."""

    kind = "lookup"

    def __init__(self, registry: InstructionRegistry, dim: int = 8, seed: int = 7):
        self.registry = registry
        self.dim = dim
        self.seed = seed
        self._class_vecs = {
            cid: _seeded_unit_vector(seed * 1_000_003 + cid, dim)
            for cid in registry.class_ids
        }
        self._unknown = _seeded_unit_vector(seed * 1_000_003 - 1, dim)

    def class_vector(self, class_id: int) -> np.ndarray:
        return self._class_vecs[class_id].copy()

    def embed(self, phrase: str) -> np.ndarray:
        cid = self.registry.class_of_phrase(phrase)
        if cid is None:
            return self._unknown.copy()
        return self._class_vecs[cid].copy()

    def classify(self, phrase: str) -> tuple[int, bool]:
        """(routed class, recognized).  Unknown phrases route to null with a
        flag so callers can surface the fallback."""
        cid = self.registry.class_of_phrase(phrase)
        if cid is None:
            return NULL_CLASS, False
        return cid, True

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "seed": self.seed}


class ExternalVectorEncoder:
    """Encoder backed by a precomputed phrase -> vector JSON file.

    Registered phrases return their own stored vector.  Phrases present in
    the file but not registered snap to the nearest registered phrase's
    vector under cosine distance (the routing mechanism for out-of-
    distribution probes).  Phrases absent from the file raise unless an
    unknown-phrase fallback was configured.
    """

    kind = "external"

    def __init__(self, registry: InstructionRegistry, path: str,
                 fallback_unknown: bool = False, seed: int = 7):
        self.registry = registry
        self.path = str(path)
        self.fallback_unknown = fallback_unknown
        with open(path) as f:
            raw = json.load(f)
        self.table = {p: np.asarray(v, dtype=float) for p, v in raw.items()}
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dims in {path}: {dims}")
        self.dim = dims.pop()
        missing = [p for cid in registry.class_ids
                   for p in registry.classes[cid].phrases if p not in self.table]
        if missing:
            raise ValueError(f"embedding file missing registered phrases: {missing}")
        self._unknown = _seeded_unit_vector(seed * 1_000_003 - 1, self.dim)

    def _nearest_registered(self, vec: np.ndarray) -> str:
        best_phrase, best = None, -np.inf
        for cid in self.registry.class_ids:
            for p in self.registry.classes[cid].phrases:
                u = self.table[p]
                sim = float(vec @ u / (np.linalg.norm(vec) * np.linalg.norm(u) + 1e-12))
                if sim > best:
                    best, best_phrase = sim, p
        return best_phrase

    def class_vector(self, class_id: int) -> np.ndarray:
        return self.table[self.registry.classes[class_id].phrases[0]].copy()

    def embed(self, phrase: str) -> np.ndarray:
        if self.registry.class_of_phrase(phrase) is not None:
            return self.table[phrase].copy()
        if phrase in self.table:
            return self.table[self._nearest_registered(self.table[phrase])].copy()
        if self.fallback_unknown:
            return self._unknown.copy()
        raise KeyError(f"phrase {phrase!r} not in embedding file and no fallback")

    def classify(self, phrase: str) -> tuple[int, bool]:
        cid = self.registry.class_of_phrase(phrase)
        if cid is not None:
            return cid, True
        if phrase in self.table:
            near = self._nearest_registered(self.table[phrase])
            return self.registry.class_of_phrase(near), False
        if self.fallback_unknown:
            return NULL_CLASS, False
        raise KeyError(f"phrase {phrase!r} not in embedding file and no fallback")

    def spec(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "path": self.path,
                "fallback_unknown": self.fallback_unknown}


def build_encoder(registry: InstructionRegistry, spec: dict):
    kind = spec.get("kind", "lookup")
    if kind == "lookup":
        return LookupEncoder(registry, dim=spec.get("dim", 8),
                             seed=spec.get("seed", 7))
    if kind == "external":
        return ExternalVectorEncoder(registry, spec["path"],
                                     fallback_unknown=spec.get("fallback_unknown", False),
                                     seed=spec.get("seed", 7))
    raise ValueError(f"unknown encoder kind {kind!r}")
