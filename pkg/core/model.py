"""Forward pass and hand-derived backward pass of the retrieval-guided decomposition model.

Pipeline per query window x (already instance-normalized):

    patches --f_phi--> AvgPool --> q --top_k--> retrieved horizons
    horizons --f_theta--> t_k --cosine attention--> h_ret
    [q; h_ret] --W_lambda--> lambda ;  h = lambda*q + (1-lambda)*h_ret
    [h; h_ret] --W_gamma--> gamma  ;  z_inv = gamma*h, z_dyn = (1-gamma)*h
    y_inv = f_inv(z_inv), y_dyn = f_dyn(z_dyn), y_hat = f_g([y_inv; y_dyn])

All predictions live in normalized space.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Optional

import numpy as np

from core import numerics as nx
from core.data import patch
from core.errors import DimensionError, DomainError
from core.numerics import DualTensor, Tensor
from schemas.train_config import Ablation, PatchConfig, TrainConfig

if TYPE_CHECKING:
    from retrieval.knowledge_base import KnowledgeBase, RetrievalResult

logger = logging.getLogger(__name__)

ENCODER_PARAMS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
PARAM_NAMES = ENCODER_PARAMS + (
    "proj_w", "proj_b",
    "lam_w", "lam_b",
    "gam_w", "gam_b",
    "inv_w", "inv_b",
    "dyn_w", "dyn_b",
    "fuse_w", "fuse_b",
)


def param_shapes(L: int, patch_len: int, d: int, d_hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        "enc_w1": (d_hidden, patch_len), "enc_b1": (d_hidden,),
        "enc_w2": (d, d_hidden), "enc_b2": (d,),
        "proj_w": (d, L), "proj_b": (d,),
        "lam_w": (d, 2 * d), "lam_b": (d,),
        "gam_w": (d, 2 * d), "gam_b": (d,),
        "inv_w": (L, d), "inv_b": (L,),
        "dyn_w": (L, d), "dyn_b": (L,),
        "fuse_w": (L, 2 * L), "fuse_b": (L,),
    }


class ModelParams:
    """Registry of every trainable tensor, in declaration order."""

    def __init__(self, T: int, L: int, patch_cfg: PatchConfig, d: int, d_hidden: int,
                 dropout: float, tensors: dict[str, DualTensor]):
        self.T = T
        self.L = L
        self.patch = patch_cfg
        self.d = d
        self.d_hidden = d_hidden
        self.dropout = dropout

        expected = param_shapes(L, patch_cfg.patch_len, d, d_hidden)
        for name in PARAM_NAMES:
            if name not in tensors:
                raise DimensionError(f"missing parameter tensor '{name}'")
            if tensors[name].shape != expected[name]:
                raise DimensionError(f"parameter '{name}' has shape {tensors[name].shape}, expected {expected[name]}")
            if not np.all(np.isfinite(tensors[name].value)):
                raise DomainError(f"parameter '{name}' contains non-finite values")
        self.tensors = {name: tensors[name] for name in PARAM_NAMES}

    @classmethod
    def init(cls, cfg: TrainConfig, seed: Optional[int] = None) -> "ModelParams":
        """
        Symmetric uniform init scaled by 1/sqrt(fan_in); gate biases start at 0
        (lambda = gamma = 0.5) and f_g starts as [I/2 | I/2] with zero bias.
        """
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        shapes = param_shapes(cfg.L, cfg.patch.patch_len, cfg.d, cfg.d_hidden)
        tensors: dict[str, DualTensor] = {}
        for name in PARAM_NAMES:
            shape = shapes[name]
            weight = name if "_w" in name else name.replace("_b", "_w")
            bound = 1.0 / np.sqrt(shapes[weight][1])
            tensors[name] = DualTensor(rng.uniform(-bound, bound, size=shape))

        tensors["lam_b"] = DualTensor(np.zeros(cfg.d))
        tensors["gam_b"] = DualTensor(np.zeros(cfg.d))
        eye = np.eye(cfg.L)
        tensors["fuse_w"] = DualTensor(np.hstack([0.5 * eye, 0.5 * eye]))
        tensors["fuse_b"] = DualTensor(np.zeros(cfg.L))

        params = cls(cfg.T, cfg.L, cfg.patch, cfg.d, cfg.d_hidden, cfg.dropout, tensors)
        logger.info(f"[MODEL] Initialized {params.n_params()} parameters "
                    f"(T={cfg.T}, L={cfg.L}, patch={cfg.patch.patch_len}/{cfg.patch.stride}, "
                    f"d={cfg.d}, d_hidden={cfg.d_hidden})")
        return params

    # ---------- registry access ----------
    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name].value

    def items(self) -> Iterator[tuple[str, DualTensor]]:
        return iter(self.tensors.items())

    def grad(self, name: str) -> Tensor:
        return self.tensors[name].grad

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.zero_grad()

    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def encoder_hash(self) -> bytes:
        """SHA-256 over the patch geometry and encoder weights; identifies KB embeddings."""
        h = hashlib.sha256()
        h.update(struct.pack("<III", self.T, self.patch.patch_len, self.patch.stride))
        for name in ENCODER_PARAMS:
            value = self.tensors[name].value
            h.update(struct.pack("<I", value.ndim))
            h.update(struct.pack(f"<{value.ndim}I", *value.shape))
            h.update(value.astype("<f8").tobytes())
        return h.digest()


@dataclass
class ForecastOutput:
    y_hat: Tensor
    y_inv: Tensor
    y_dyn: Tensor
    h: Tensor
    h_ret: Tensor
    q: Tensor
    z_inv: Tensor
    z_dyn: Tensor
    lambda_gate: Tensor
    gamma_gate: Tensor
    omega: Tensor
    retrieved_ids: np.ndarray
    similarities: Tensor = field(default_factory=lambda: np.zeros(0))
    cache: dict = field(default_factory=dict, repr=False)


# ---------- stages ----------
def _encode(x: Tensor, params: ModelParams, cfg: PatchConfig, mask: Optional[Tensor] = None) -> tuple[Tensor, dict]:
    X = patch(x, cfg)
    A1 = nx.linear(X, params["enc_w1"], params["enc_b1"])
    H1 = nx.tanh(A1)
    H1d = H1 * mask if mask is not None else H1
    F = nx.linear(H1d, params["enc_w2"], params["enc_b2"])
    q = F.mean(axis=0)
    return q, {"X": X, "H1": H1, "H1d": H1d, "mask1": mask}


def encode(x: Tensor, params: ModelParams, cfg: Optional[PatchConfig] = None) -> Tensor:
    """Mean of the shared encoder's features over all patches of x."""
    q, _ = _encode(nx.as_tensor(x), params, cfg or params.patch)
    return q


def _aggregate(q: Tensor, horizons: Tensor, params: ModelParams, temperature: float) -> tuple[Tensor, Tensor, dict]:
    if horizons.ndim != 2 or horizons.shape[0] == 0:
        raise DomainError("aggregate_retrieval needs at least one retrieved horizon")
    Tk = nx.linear(horizons, params["proj_w"], params["proj_b"])
    cos = np.array([nx.cosine_sim(q, t) for t in Tk])
    omega = nx.softmax(cos / temperature)
    h_ret = omega @ Tk
    return h_ret, omega, {"Y": horizons, "Tk": Tk, "omega": omega}


def aggregate_retrieval(q: Tensor, horizons: Tensor, params: ModelParams,
                        temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """Project retrieved horizons to t_k and softmax-weight them by cosine(q, t_k)."""
    h_ret, omega, _ = _aggregate(q, nx.as_tensor(horizons), params, temperature)
    return h_ret, omega


def fuse(q: Tensor, h_ret: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    lam = nx.sigmoid(nx.linear(np.concatenate([q, h_ret]), params["lam_w"], params["lam_b"]))
    h = lam * q + (1.0 - lam) * h_ret
    return h, lam


def decompose(h: Tensor, h_ret: Tensor, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    gamma = nx.sigmoid(nx.linear(np.concatenate([h, h_ret]), params["gam_w"], params["gam_b"]))
    z_inv = gamma * h
    z_dyn = h - z_inv   # keeps z_inv + z_dyn == h to rounding of a single subtraction
    return z_inv, z_dyn, gamma


def predict(z_inv: Tensor, z_dyn: Tensor, params: ModelParams) -> tuple[Tensor, Tensor, Tensor]:
    y_inv = nx.linear(z_inv, params["inv_w"], params["inv_b"])
    y_dyn = nx.linear(z_dyn, params["dyn_w"], params["dyn_b"])
    y_hat = nx.linear(np.concatenate([y_inv, y_dyn]), params["fuse_w"], params["fuse_b"])
    return y_hat, y_inv, y_dyn


def predict_single(h: Tensor, params: ModelParams) -> Tensor:
    """Single head used when the decomposition is ablated."""
    return nx.linear(h, params["inv_w"], params["inv_b"])


# ---------- full pass ----------
def forward(
    x: Tensor,
    kb: Optional["KnowledgeBase"],
    params: ModelParams,
    cfg: TrainConfig,
    K: Optional[int] = None,
    exclude_id: Optional[int] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    retrieval: Optional["RetrievalResult"] = None,
) -> ForecastOutput:
    """
    encode -> top_k -> aggregate_retrieval -> fuse -> decompose -> predict.
    Dropout (encoder hidden layer and h) is applied only when `training` is
    set and a generator is supplied. A precomputed `retrieval` skips the KB query.
    """
    x = nx.as_tensor(x)
    if x.shape != (params.T,):
        raise DimensionError(f"context has shape {x.shape}, model expects ({params.T},)")
    ablation: Ablation = cfg.ablation
    K = cfg.K if K is None else K
    d = params.d
    rate = params.dropout if training and rng is not None else 0.0

    mask1 = mask2 = None
    if rate > 0:
        P = (params.T - params.patch.patch_len) // params.patch.stride + 1
        mask1 = (rng.random((P, params.d_hidden)) >= rate) / (1.0 - rate)
        mask2 = (rng.random(d) >= rate) / (1.0 - rate)

    q, enc_cache = _encode(x, params, params.patch, mask1)
    cache: dict = {"enc": enc_cache, "ablation": ablation, "temperature": cfg.temperature}

    if ablation.uses_retrieval:
        if retrieval is None:
            if kb is None:
                raise DomainError("retrieval requested but no knowledge base supplied")
            retrieval = kb.top_k(q, K, exclude_id=exclude_id)
        h_ret, omega, agg_cache = _aggregate(q, retrieval.horizons, params, cfg.temperature)
        cache["agg"] = agg_cache
        h_fused, lam = fuse(q, h_ret, params)
        ids = np.asarray(retrieval.ids)
        sims = np.asarray(retrieval.similarities)
    else:
        h_ret = np.zeros(d)
        omega = np.zeros(0)
        lam = np.ones(d)
        h_fused = q
        ids = np.zeros(0, dtype=np.int64)
        sims = np.zeros(0)

    h = h_fused * mask2 if mask2 is not None else h_fused
    cache.update({"q": q, "h_ret": h_ret, "lam": lam, "h_fused": h_fused, "mask2": mask2, "h": h})

    if ablation.uses_idd:
        z_inv, z_dyn, gamma = decompose(h, h_ret, params)
        y_hat, y_inv, y_dyn = predict(z_inv, z_dyn, params)
    else:
        z_inv, z_dyn, gamma = h, np.zeros(d), np.ones(d)
        y_hat = predict_single(h, params)
        y_inv, y_dyn = y_hat, np.zeros(params.L)
    cache["gamma"] = gamma

    return ForecastOutput(
        y_hat=y_hat, y_inv=y_inv, y_dyn=y_dyn, h=h, h_ret=h_ret, q=q,
        z_inv=z_inv, z_dyn=z_dyn, lambda_gate=lam, gamma_gate=gamma,
        omega=omega, retrieved_ids=ids, similarities=sims, cache=cache,
    )


def backward(out: ForecastOutput, params: ModelParams, g_yhat: Tensor,
             g_zinv: Optional[Tensor] = None, g_zdyn: Optional[Tensor] = None) -> None:
    """Accumulate d(loss)/d(param) into params' grads given the loss adjoints of one sample."""
    c = out.cache
    d, L = params.d, params.L
    G = params.grad
    g_zinv = np.zeros(d) if g_zinv is None else g_zinv
    g_zdyn = np.zeros(d) if g_zdyn is None else g_zdyn
    ablation: Ablation = c["ablation"]
    h, h_ret = c["h"], c["h_ret"]

    # predictors + decomposition
    if ablation.uses_idd:
        y_cat = np.concatenate([out.y_inv, out.y_dyn])
        g_cat, gW, gb = nx.linear_backward(y_cat, params["fuse_w"], g_yhat)
        G("fuse_w")[...] += gW
        G("fuse_b")[...] += gb
        g_yinv, g_ydyn = g_cat[:L], g_cat[L:]

        gz, gW, gb = nx.linear_backward(out.z_inv, params["inv_w"], g_yinv)
        G("inv_w")[...] += gW
        G("inv_b")[...] += gb
        g_zinv = g_zinv + gz
        gz, gW, gb = nx.linear_backward(out.z_dyn, params["dyn_w"], g_ydyn)
        G("dyn_w")[...] += gW
        G("dyn_b")[...] += gb
        g_zdyn = g_zdyn + gz

        gamma = c["gamma"]
        g_h = gamma * g_zinv + (1.0 - gamma) * g_zdyn
        g_a = nx.sigmoid_backward(gamma, h * (g_zinv - g_zdyn))
        g_in, gW, gb = nx.linear_backward(np.concatenate([h, h_ret]), params["gam_w"], g_a)
        G("gam_w")[...] += gW
        G("gam_b")[...] += gb
        g_h = g_h + g_in[:d]
        g_hret = g_in[d:].copy()
    else:
        gh, gW, gb = nx.linear_backward(h, params["inv_w"], g_yhat)
        G("inv_w")[...] += gW
        G("inv_b")[...] += gb
        g_h = gh + g_zinv
        g_hret = np.zeros(d)

    if c["mask2"] is not None:
        g_h = g_h * c["mask2"]

    # fusion gate + attention
    q = c["q"]
    if ablation.uses_retrieval:
        lam = c["lam"]
        g_q = lam * g_h
        g_hret = g_hret + (1.0 - lam) * g_h
        g_a = nx.sigmoid_backward(lam, g_h * (q - h_ret))
        g_in, gW, gb = nx.linear_backward(np.concatenate([q, h_ret]), params["lam_w"], g_a)
        G("lam_w")[...] += gW
        G("lam_b")[...] += gb
        g_q = g_q + g_in[:d]
        g_hret = g_hret + g_in[d:]

        agg = c["agg"]
        Tk, omega, Y = agg["Tk"], agg["omega"], agg["Y"]
        g_T = np.outer(omega, g_hret)
        g_omega = Tk @ g_hret
        g_logits = nx.softmax_backward(omega, g_omega) / c["temperature"]
        for k in range(Tk.shape[0]):
            ga, gt = nx.cosine_sim_backward(q, Tk[k], g_logits[k])
            g_q = g_q + ga
            g_T[k] += gt
        _, gW, gb = nx.linear_backward(Y, params["proj_w"], g_T)
        G("proj_w")[...] += gW
        G("proj_b")[...] += gb
    else:
        g_q = g_h

    # encoder: q = mean over patches
    enc = c["enc"]
    P = enc["X"].shape[0]
    g_F = np.broadcast_to(g_q / P, (P, d))
    g_H1d, gW, gb = nx.linear_backward(enc["H1d"], params["enc_w2"], g_F)
    G("enc_w2")[...] += gW
    G("enc_b2")[...] += gb
    g_H1 = g_H1d * enc["mask1"] if enc["mask1"] is not None else g_H1d
    g_A1 = nx.tanh_backward(enc["H1"], g_H1)
    _, gW, gb = nx.linear_backward(enc["X"], params["enc_w1"], g_A1)
    G("enc_w1")[...] += gW
    G("enc_b1")[...] += gb
