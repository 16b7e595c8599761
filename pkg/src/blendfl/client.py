"""Client-side models and local training."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import nn_core
from .data import ClientDataset, MultimodalSample
from .messages import FeatureBatch, ProtocolError
from .nn_core import LayerSpec, Network

HEAD_NAMES = ("f_a", "f_b", "g_a", "g_b", "g_m")


class CapabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelBundle:
    """Encoders ``f_*`` and classifiers ``g_*`` held by one party."""
    f_a: Optional[Network] = None
    f_b: Optional[Network] = None
    g_a: Optional[Network] = None
    g_b: Optional[Network] = None
    g_m: Optional[Network] = None

    def __post_init__(self):
        if self.g_a is not None and self.f_a is None:
            raise ValueError("g_a requires f_a")
        if self.g_b is not None and self.f_b is None:
            raise ValueError("g_b requires f_b")
        if self.g_m is not None and self.f_a is not None and self.f_b is not None:
            if self.g_m.input_dim != self.f_a.output_dim + self.f_b.output_dim:
                raise ValueError("g_m input_dim must equal the two latent widths combined")

    def encoder(self, modality: str) -> Optional[Network]:
        return self.f_a if modality == "A" else self.f_b

    def head(self, modality: str) -> Optional[Network]:
        return self.g_a if modality == "A" else self.g_b

    def with_modality(self, modality: str, encoder: Network, head: Optional[Network] = None) -> "ModelBundle":
        if modality == "A":
            return replace(self, f_a=encoder, g_a=self.g_a if head is None else head)
        return replace(self, f_b=encoder, g_b=self.g_b if head is None else head)

    # unimodal aggregation unit: encoder params followed by classifier params
    def unimodal_vector(self, modality: str) -> np.ndarray:
        return np.concatenate([self.encoder(modality).params, self.head(modality).params])

    def with_unimodal_vector(self, modality: str, vec: np.ndarray) -> "ModelBundle":
        f, g = self.encoder(modality), self.head(modality)
        if vec.size != f.n_params + g.n_params:
            raise ValueError("unimodal vector does not match encoder+classifier layout")
        return self.with_modality(modality, f.with_params(vec[:f.n_params]), g.with_params(vec[f.n_params:]))

    def can_predict(self, modality: str) -> bool:
        return self.encoder(modality) is not None and self.head(modality) is not None

    @property
    def multimodal_ready(self) -> bool:
        return self.f_a is not None and self.f_b is not None and self.g_m is not None

    def predict(self, modality: str, X: np.ndarray) -> np.ndarray:
        return self.head(modality)(self.encoder(modality)(X))

    def predict_multimodal(self, XA: np.ndarray, XB: np.ndarray, g_m: Optional[Network] = None) -> np.ndarray:
        head = self.g_m if g_m is None else g_m
        return head(np.hstack([self.f_a(XA), self.f_b(XB)]))

    def networks(self) -> dict:
        return {name: getattr(self, name) for name in HEAD_NAMES if getattr(self, name) is not None}

    @classmethod
    def from_networks(cls, nets: dict) -> "ModelBundle":
        unknown = set(nets) - set(HEAD_NAMES)
        if unknown:
            raise ValueError(f"unknown networks in bundle: {sorted(unknown)}")
        return cls(**nets)


def encoder_layers(input_dim: int, hidden: int, latent: int) -> list:
    return [LayerSpec(input_dim, hidden, "relu"), LayerSpec(hidden, latent, "relu")]


def classifier_layers(input_dim: int, n_classes: int) -> list:
    return [LayerSpec(input_dim, n_classes, "softmax")]


def build_bundle(model_cfg, dim_a: int, dim_b: int, n_classes: int, rng: np.random.Generator) -> ModelBundle:
    """Freshly initialised global bundle with all five networks."""
    h, z = model_cfg.hidden_dim, model_cfg.latent_dim
    return ModelBundle(
        f_a=Network.init(encoder_layers(dim_a, h, z), rng),
        f_b=Network.init(encoder_layers(dim_b, h, z), rng),
        g_a=Network.init(classifier_layers(z, n_classes), rng),
        g_b=Network.init(classifier_layers(z, n_classes), rng),
        g_m=Network.init(classifier_layers(2 * z, n_classes), rng),
    )


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack(samples, modality):
    if not samples:
        return None
    return np.vstack([s.features(modality) for s in samples])


class Prediction(NamedTuple):
    label: int
    probs: np.ndarray
    head: str


class Client:
    """One federation member: its private data, local models and pending traces.

    Only ``FeatureBatch`` objects and model parameters leave a client; raw
    features and labels are never exposed through the public methods.
    """

    def __init__(self, data: ClientDataset, bundle: ModelBundle, rng: np.random.Generator,
                 fragmented_in_unimodal: bool = True):
        self.client_id = data.client_id
        self._data = data
        self._rng = rng
        self.fragmented_in_unimodal = fragmented_in_unimodal
        self.pending_traces: dict = {}
        self.bundle = self._trim(bundle)

        self._uni = {}
        self._index = {}
        for m in ("A", "B"):
            samples = data.unimodal(m, fragmented_in_unimodal)
            self._uni[m] = (_stack(samples, m), np.array([s.label for s in samples], dtype=np.int64))
            # every locally held record of modality m, addressable by id
            held = data.paired + data.fragmented(m)
            self._index[m] = {s.id: (s.features(m), s.label) for s in held}
        self._paired = (_stack(data.paired, "A"), _stack(data.paired, "B"),
                        np.array([s.label for s in data.paired], dtype=np.int64))

    def _trim(self, bundle: ModelBundle) -> ModelBundle:
        keep = {}
        for m, f, g in (("A", "f_a", "g_a"), ("B", "f_b", "g_b")):
            if self._data.holds(m):
                keep[f], keep[g] = getattr(bundle, f), getattr(bundle, g)
        if self._data.paired:
            keep["g_m"] = bundle.g_m
        return ModelBundle(**keep)

    # -- holdings ----------------------------------------------------------
    def holds(self, modality: str) -> bool:
        return self._data.holds(modality)

    @property
    def has_paired(self) -> bool:
        return bool(self._data.paired)

    def n_records(self, modality: str) -> int:
        d = self._data
        return len(d.paired) + len(d.fragmented(modality)) + len(d.partial(modality))

    def n_paired(self) -> int:
        return len(self._data.paired)

    def n_unimodal(self, modality: str) -> int:
        return len(self._uni[modality][1])

    def fragmented_ids(self, modality: str) -> tuple:
        return tuple(s.id for s in self._data.fragmented(modality))

    def paired_ids(self) -> tuple:
        return tuple(s.id for s in self._data.paired)

    def n_partial(self) -> int:
        return len(self._data.partial_a) + len(self._data.partial_b)

    # -- local training -----------------------------------------------------
    def train_local_partial(self, modality: str, lr: float, batch_size: int) -> Optional[float]:
        """One epoch of mini-batch SGD on the encoder+classifier of ``modality``.

        Returns the mean training loss, or ``None`` when there is nothing to
        train on.
        """
        X, y = self._uni[modality]
        if X is None or not self.bundle.can_predict(modality):
            return None
        f, g = self.bundle.encoder(modality), self.bundle.head(modality)
        total = 0.0
        for idx in minibatches(len(y), batch_size, self._rng):
            h, tf = nn_core.forward(f, X[idx])
            out, tg = nn_core.forward(g, h)
            loss, dout = nn_core.loss_and_grad(out, y[idx])
            gg, dh = nn_core.backward(g, tg, dout)
            gf, _ = nn_core.backward(f, tf, dh)
            f, g = nn_core.sgd_step(f, gf, lr), nn_core.sgd_step(g, gg, lr)
            total += loss * len(idx)
        self.bundle = self.bundle.with_modality(modality, f, g)
        return total / len(y)

    def train_local_paired(self, lr: float, batch_size: int) -> Optional[float]:
        """One epoch of end-to-end training of f_a, f_b and g_m on paired data."""
        XA, XB, y = self._paired
        if XA is None or not self.bundle.multimodal_ready:
            return None
        fa, fb, gm = self.bundle.f_a, self.bundle.f_b, self.bundle.g_m
        split = fa.output_dim
        total = 0.0
        for idx in minibatches(len(y), batch_size, self._rng):
            ha, ta = nn_core.forward(fa, XA[idx])
            hb, tb = nn_core.forward(fb, XB[idx])
            out, tm = nn_core.forward(gm, np.hstack([ha, hb]))
            loss, dout = nn_core.loss_and_grad(out, y[idx])
            ggm, dh = nn_core.backward(gm, tm, dout)
            gfa, _ = nn_core.backward(fa, ta, dh[:, :split])
            gfb, _ = nn_core.backward(fb, tb, dh[:, split:])
            fa, fb, gm = nn_core.sgd_step(fa, gfa, lr), nn_core.sgd_step(fb, gfb, lr), nn_core.sgd_step(gm, ggm, lr)
            total += loss * len(idx)
        self.bundle = replace(self.bundle, f_a=fa, f_b=fb, g_m=gm)
        return total / len(y)

    # -- vertical path ------------------------------------------------------
    def forward_features(self, modality: str, ids, round_tag) -> FeatureBatch:
        """Encode locally held records of ``modality`` and cache the trace."""
        if modality in self.pending_traces:
            raise ProtocolError(
                f"client {self.client_id}: modality {modality} already has a pending trace "
                f"(tag {self.pending_traces[modality][0]!r})"
            )
        f = self.bundle.encoder(modality)
        if f is None:
            raise ProtocolError(f"client {self.client_id} has no {modality} encoder")
        ids = tuple(int(i) for i in ids)
        try:
            rows = [self._index[modality][i] for i in ids]
        except KeyError as exc:
            raise ProtocolError(f"client {self.client_id} holds no {modality} record {exc.args[0]}") from None
        if not rows:
            raise ProtocolError("empty feature request")
        X = np.vstack([r[0] for r in rows])
        h, trace = nn_core.forward(f, X)
        self.pending_traces[modality] = (round_tag, ids, trace)
        labels = np.array([r[1] for r in rows], dtype=np.int64) if modality == "A" else None
        return FeatureBatch(self.client_id, modality, round_tag, ids, h, labels)

    def forward_fragmented(self, modality: str, round_tag, ids=None) -> FeatureBatch:
        frag = self.fragmented_ids(modality)
        if not frag:
            raise ProtocolError(f"client {self.client_id} holds no fragmented {modality} data")
        if ids is None:
            ids = frag
        elif not set(ids) <= set(frag):
            raise ProtocolError("requested ids are not fragmented records of this client")
        return self.forward_features(modality, ids, round_tag)

    def apply_server_gradients(self, modality: str, feature_grad: np.ndarray, round_tag, lr: float) -> np.ndarray:
        """Backpropagate the server's feature gradient into the local encoder.

        Returns the encoder parameter gradient that was applied.
        """
        pending = self.pending_traces.get(modality)
        if pending is None:
            raise ProtocolError(f"client {self.client_id}: no pending {modality} trace")
        tag, ids, trace = pending
        if tag != round_tag:
            raise ProtocolError(f"round tag mismatch: pending {tag!r}, got {round_tag!r}")
        f = self.bundle.encoder(modality)
        grad = np.asarray(feature_grad, dtype=np.float64)
        if grad.shape != trace.post[-1].shape:
            raise ProtocolError(f"gradient shape {grad.shape} != feature shape {trace.post[-1].shape}")
        del self.pending_traces[modality]
        pgrad, _ = nn_core.backward(f, trace, grad)
        self.bundle = self.bundle.with_modality(modality, nn_core.sgd_step(f, pgrad, lr))
        return pgrad

    # -- model exchange -----------------------------------------------------
    def load_globals(self, bundle: ModelBundle) -> None:
        """Overwrite local models with the distributed global ones.

        The multimodal head is installed on every client; encoders and
        unimodal classifiers only for modalities the client holds.
        """
        keep = {}
        for m, f, g in (("A", "f_a", "g_a"), ("B", "f_b", "g_b")):
            if self._data.holds(m):
                keep[f], keep[g] = getattr(bundle, f), getattr(bundle, g)
        keep["g_m"] = bundle.g_m
        self.bundle = ModelBundle(**keep)

    # -- inference ----------------------------------------------------------
    def local_inference(self, sample: MultimodalSample) -> Prediction:
        return local_inference(self.bundle, sample)


def local_inference(bundle: ModelBundle, sample: MultimodalSample) -> Prediction:
    """Predict with locally held models only; no server is involved."""
    if sample.is_multimodal and bundle.multimodal_ready:
        probs = bundle.predict_multimodal(sample.x_a[None, :], sample.x_b[None, :])[0]
        head = "multimodal"
    elif sample.x_a is not None and bundle.can_predict("A"):
        probs, head = bundle.predict("A", sample.x_a[None, :])[0], "unimodal_A"
    elif sample.x_b is not None and bundle.can_predict("B"):
        probs, head = bundle.predict("B", sample.x_b[None, :])[0], "unimodal_B"
    else:
        raise CapabilityError(f"no local head can score sample {sample.id}")
    return Prediction(int(np.argmax(probs)), probs, head)
