"""Named parameter storage, the Adam update, and npz checkpointing."""

from __future__ import annotations

import numpy as np

from .dense import as_dense


class ParamStore:
    """Flat registry of named float64 parameter arrays.

    Holds, per parameter: the value, a gradient accumulator, and Adam
    first/second moments. Gradients accumulate additively via
    :meth:`accumulate` and are consumed (zeroed) by :func:`adam_step`.

    Layers keep direct references to the arrays returned by :meth:`add`;
    every mutation here (updates, checkpoint restore) is in place so those
    references stay live.

    Checkpoints are npz archives of little-endian float64 (``<f8``) arrays,
    one entry per value/moment plus the step counter; ``save`` followed by
    :meth:`restore` reproduces values, moments, and step count exactly.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self._touched: set[str] = set()

    def add(self, name: str, value) -> np.ndarray:
        """Register a new parameter; returns the live array."""
        if name in self.params:
            raise ValueError(f"duplicate parameter name '{name}'")
        arr = as_dense(value, name).copy()
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def names(self) -> tuple[str, ...]:
        # creation order, which is deterministic for a fixed model build
        return tuple(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def accumulate(self, name: str, grad) -> None:
        """Add ``grad`` into the accumulator for ``name``."""
        if name not in self.params:
            raise KeyError(f"unknown parameter '{name}'")
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != self.params[name].shape:
            raise ValueError(
                f"gradient for '{name}' has shape {g.shape}, "
                f"parameter is {self.params[name].shape}"
            )
        self.grads[name] += g
        self._touched.add(name)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0
        self._touched.clear()

    # -- flat views used by finite-difference spot checks --------------------

    def pack(self) -> np.ndarray:
        """All parameter values concatenated in creation order."""
        if not self.params:
            return np.zeros(0)
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def unpack(self, vec) -> None:
        """Write a flat vector back into the parameter arrays, in place."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params():
            raise ValueError(
                f"flat vector has {vec.size} entries, store holds {self.n_params()}"
            )
        ofs = 0
        for n in self.names():
            p = self.params[n]
            p[...] = vec[ofs : ofs + p.size].reshape(p.shape)
            ofs += p.size

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        payload = {"meta/step": np.array([self.step_count], dtype=np.int64)}
        for name in self.names():
            payload[f"p/{name}"] = self.params[name].astype("<f8", copy=False)
            payload[f"m/{name}"] = self.m[name].astype("<f8", copy=False)
            payload[f"v/{name}"] = self.v[name].astype("<f8", copy=False)
        np.savez(path, **payload)

    def restore(self, path) -> None:
        """Load a checkpoint written by :meth:`save` into this store, in place.

        The store must already hold the same parameter set (same names and
        shapes); a mismatch is reported rather than papered over. Gradients
        are zeroed.
        """
        with np.load(path) as z:
            file_names = {k[2:] for k in z.files if k.startswith("p/")}
            if file_names != set(self.params):
                missing = sorted(set(self.params) - file_names)
                extra = sorted(file_names - set(self.params))
                raise ValueError(
                    f"checkpoint does not match store: missing {missing}, unexpected {extra}"
                )
            for name, p in self.params.items():
                src = z[f"p/{name}"]
                if src.shape != p.shape:
                    raise ValueError(
                        f"checkpoint entry '{name}' has shape {src.shape}, store has {p.shape}"
                    )
                p[...] = src
                self.m[name][...] = z[f"m/{name}"]
                self.v[name][...] = z[f"v/{name}"]
            self.step_count = int(z["meta/step"][0])
        self.zero_grads()

    def adam_step(self, **kwargs) -> None:
        adam_step(self, **kwargs)


def adam_step(
    store: ParamStore,
    lr: float = 0.002,
    weight_decay: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    Weight decay is L2-coupled: ``g <- g + weight_decay * theta`` before the
    moment updates, so decay acts even when the raw gradient is zero. Every
    parameter must have received at least one (possibly zero) gradient
    accumulation since the last step; a parameter nobody touched is a wiring
    bug and is rejected by name. Gradients are zeroed after the update.
    """
    missing = [n for n in store.names() if n not in store._touched]
    if missing:
        raise ValueError(
            f"no gradient accumulated for parameter '{missing[0]}' "
            f"({len(missing)} missing in total)"
        )
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        if weight_decay != 0.0:
            g = g + weight_decay * p
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        store.grads[name][...] = 0.0
    store._touched.clear()
