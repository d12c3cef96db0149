"""Hierarchical vision-IMU fusion network for hand pose regression.

Per-channel temporal transformer over the IMU windows, a small strided
convnet over the 32x32 rasters, then two attention stages: a 13-token
cross-sensor layer whose scores are biased by -alpha times the sensor
geodesic distance matrix, and a 2-token layer that re-balances the fused
visual token against the pooled sensor summary. The head decodes 22 joint
angles, a 6-D continuous wrist rotation (Gram-Schmidt orthonormalized),
wrist translation, and one positive sigma per landmark.

Both attention stages are plain (no residual or layer norm around them):
the second stage must reproduce its input exactly when both tokens agree,
which a residual-plus-norm wrapper would break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .configio import ConfigError
from .layout import N_TOKENS, SensorLayout, token_distance_matrix
from .optim import glorot_uniform, restore_params
from .pipeline import channel_map_for
from .skeleton import (
    HandPose,
    HandSkeleton,
    N_DOF,
    N_LANDMARKS,
    fk_root_batch,
    fk_world_batch,
    pull_back_landmark_grads,
)

MODES = ("fused", "vision_only", "imu_only")


@dataclass
class ModelConfig:
    d: int = 64                 # shared embedding width
    heads: int = 4
    imu_embed: int = 69
    imu_heads: int = 3          # 69 splits into 3 heads, not 4
    imu_layers: int = 2
    imu_ff_mult: int = 2
    imu_attn_axis: str = "time"  # attention runs over the 14 timesteps
    raster_size: int = 32
    alpha_init: float = 1.0
    activation_threshold: float = 1.0 / 12.0
    sigma_floor: float = 1e-4
    lambda_angle: float = 1.0
    drop_vision: float = 0.15   # fused-mode modality dropout rates
    drop_imu: float = 0.15

    def validate(self) -> None:
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.imu_embed % self.imu_heads != 0:
            raise ConfigError(
                f"imu_embed={self.imu_embed} not divisible by {self.imu_heads} heads")
        if not np.isfinite(self.alpha_init):
            raise ConfigError("alpha_init must be finite")
        if self.imu_attn_axis != "time":
            raise ConfigError(
                f"unsupported imu_attn_axis {self.imu_attn_axis!r} (only 'time')")
        if not 0.0 < self.activation_threshold < 1.0:
            raise ConfigError("activation_threshold must lie in (0, 1)")
        if self.raster_size < 15:
            raise ConfigError("raster_size below the three stride-2 conv stages")
        if self.drop_vision + self.drop_imu >= 1.0:
            raise ConfigError("modality dropout rates must sum below 1")

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cfg = ModelConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown model config field {k!r}")
            setattr(cfg, k, v)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FusionOutput:
    pose: HandPose
    sigma: np.ndarray             # (21,) positive, meters
    a_vis: np.ndarray             # (12,) nonnegative, sums to 1
    activated_sensors: np.ndarray  # (12,) bool
    mode: str = "fused"
    translation_valid: bool = True   # False for imu_only
    a_vis_valid: bool = True         # False when sensors were nulled out


def _tile_token(token: Tensor, shape_prefix: tuple) -> Tensor:
    """Broadcast a learned (d,) token to (*shape_prefix, d) with gradient."""
    d = token.shape[0]
    ones = ad.constant(np.ones(shape_prefix + (1,)))
    return ad.matmul(ones, ad.reshape(token, (1, d)))


class FusionModel:
    def __init__(self, cfg: ModelConfig, skeleton: HandSkeleton,
                 layout: SensorLayout, seed: int = 0,
                 channel_map: list | None = None):
        cfg.validate()
        self.cfg = cfg
        self.skeleton = skeleton
        self.layout = layout
        self.channel_map = channel_map or channel_map_for(layout)
        self.d_geo = token_distance_matrix(layout).astype(np.float64)
        self.groups = [[c for c, (s, _) in enumerate(self.channel_map) if s == k]
                       for k in range(layout.n_sensors)]
        if any(not g for g in self.groups):
            empty = [k for k, g in enumerate(self.groups) if not g]
            raise ConfigError(f"sensors with zero channels: {empty}")

        rng = np.random.default_rng(seed)
        d, E = cfg.d, cfg.imu_embed
        p: dict[str, Tensor] = {}

        def par(name, shape, fan_in, fan_out):
            p[name] = ad.parameter(glorot_uniform(rng, fan_in, fan_out, shape), name)

        def zeros(name, shape):
            p[name] = ad.parameter(np.zeros(shape), name)

        par("imu/embed/w", (3, E), 3, E)
        zeros("imu/embed/b", (E,))
        for i in range(cfg.imu_layers):
            for w in ("wq", "wk", "wv", "wo"):
                par(f"imu/l{i}/{w}", (E, E), E, E)
            p[f"imu/l{i}/ln1/g"] = ad.parameter(np.ones(E), f"imu/l{i}/ln1/g")
            zeros(f"imu/l{i}/ln1/b", (E,))
            hid = cfg.imu_ff_mult * E
            par(f"imu/l{i}/ff/w1", (E, hid), E, hid)
            zeros(f"imu/l{i}/ff/b1", (hid,))
            par(f"imu/l{i}/ff/w2", (hid, E), hid, E)
            zeros(f"imu/l{i}/ff/b2", (E,))
            p[f"imu/l{i}/ln2/g"] = ad.parameter(np.ones(E), f"imu/l{i}/ln2/g")
            zeros(f"imu/l{i}/ln2/b", (E,))
        par("imu/head/w1", (E, d), E, d)
        zeros("imu/head/b1", (d,))
        par("imu/head/w2", (d, d), d, d)
        zeros("imu/head/b2", (d,))

        chans = (1, 8, 16, 32)
        for i in range(3):
            ci, co = chans[i], chans[i + 1]
            par(f"vis/c{i}/k", (co, ci, 3, 3), ci * 9, co * 9)
            zeros(f"vis/c{i}/b", (co,))
        par("vis/out/w", (32, d), 32, d)
        zeros("vis/out/b", (d,))

        par("sensor/proj/w", (d, d), d, d)
        zeros("sensor/proj/b", (d,))

        for stage in ("fuse1", "fuse2"):
            for w in ("wq", "wk", "wv", "wo"):
                par(f"{stage}/{w}", (d, d), d, d)

        par("null/vision", (d,), d, d)
        par("null/sensor", (d,), d, d)
        p["alpha"] = ad.parameter(np.array(cfg.alpha_init), "alpha")

        par("head/phi/w", (d, N_DOF), d, N_DOF)
        zeros("head/phi/b", (N_DOF,))
        par("head/rot/w", (d, 6), d, 6)
        p["head/rot/b"] = ad.parameter(
            np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), "head/rot/b")
        par("head/t/w", (d, 3), d, 3)
        zeros("head/t/b", (3,))
        par("head/sigma/w", (d, N_LANDMARKS), d, N_LANDMARKS)
        # softplus(-3) + floor ~ 5 cm starting uncertainty
        p["head/sigma/b"] = ad.parameter(np.full(N_LANDMARKS, -3.0), "head/sigma/b")

        self._params = p

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        restore_params(self._params, arrays)

    def n_params(self) -> int:
        return sum(p.value.size for p in self._params.values())

    # ------------------------------------------------------------------
    # Encoders
    # ------------------------------------------------------------------

    def imu_encoder(self, windows) -> Tensor:
        """(B, 14, C, 3) windows -> (B, C, d) channel tokens.

        Channels fold into the batch, so self-attention runs over the 14
        timesteps of each channel independently.
        """
        p = self.cfg
        w = windows if isinstance(windows, Tensor) else ad.constant(windows)
        if w.ndim != 4 or w.shape[3] != 3:
            raise ad.ShapeError(f"imu window batch shape {w.shape}")
        B, T, C, _ = w.shape
        x = ad.reshape(ad.transpose(w, (0, 2, 1, 3)), (B * C, T, 3))
        x = ad.linear(x, self._params["imu/embed/w"], self._params["imu/embed/b"])
        x = ad.add(x, ad.constant(ad.sinusoidal_pe(T, p.imu_embed)))
        for i in range(p.imu_layers):
            g = self._params
            att, _ = ad.multi_head_attention(
                x, g[f"imu/l{i}/wq"], g[f"imu/l{i}/wk"], g[f"imu/l{i}/wv"],
                g[f"imu/l{i}/wo"], p.imu_heads)
            x = ad.layer_norm(ad.add(x, att),
                              g[f"imu/l{i}/ln1/g"], g[f"imu/l{i}/ln1/b"])
            ff = ad.linear(ad.gelu(ad.linear(x, g[f"imu/l{i}/ff/w1"],
                                             g[f"imu/l{i}/ff/b1"])),
                           g[f"imu/l{i}/ff/w2"], g[f"imu/l{i}/ff/b2"])
            x = ad.layer_norm(ad.add(x, ff),
                              g[f"imu/l{i}/ln2/g"], g[f"imu/l{i}/ln2/b"])
        last = ad.reshape(ad.slice_along(x, 1, T - 1, T), (B * C, p.imu_embed))
        h = ad.gelu(ad.linear(last, self._params["imu/head/w1"],
                              self._params["imu/head/b1"]))
        h = ad.linear(h, self._params["imu/head/w2"], self._params["imu/head/b2"])
        return ad.reshape(h, (B, C, p.d))

    def vision_encoder(self, rasters) -> Tensor:
        """(B, H, W) rasters -> (B, d) visual tokens."""
        r = rasters if isinstance(rasters, Tensor) else ad.constant(rasters)
        if r.ndim != 3 or r.shape[1] != self.cfg.raster_size \
                or r.shape[2] != self.cfg.raster_size:
            raise ad.ShapeError(f"raster batch shape {r.shape}, "
                              f"expected (B, {self.cfg.raster_size}, {self.cfg.raster_size})")
        B, H, W = r.shape
        x = ad.reshape(r, (B, 1, H, W))
        for i in range(3):
            k = self._params[f"vis/c{i}/k"]
            b = self._params[f"vis/c{i}/b"]
            x = ad.conv2d(x, k, stride=2)
            x = ad.relu(ad.add(x, ad.reshape(b, (1, b.shape[0], 1, 1))))
        pooled = ad.mean_pool(ad.mean_pool(x, 3), 2)   # (B, 32)
        return ad.linear(pooled, self._params["vis/out/w"],
                         self._params["vis/out/b"])

    def sensor_tokens(self, f_imu: Tensor) -> Tensor:
        """(B, C, d) channel tokens -> (B, 12, d): per-sensor channel mean,
        then one shared projection."""
        B = f_imu.shape[0]
        toks = []
        for rows in self.groups:
            parts = [ad.slice_along(f_imu, 1, r, r + 1) for r in rows]
            acc = parts[0]
            for extra in parts[1:]:
                acc = ad.add(acc, extra)
            toks.append(ad.scale(acc, 1.0 / len(parts)))
        stacked = ad.concat(toks, axis=1)              # (B, 12, d)
        return ad.linear(stacked, self._params["sensor/proj/w"],
                         self._params["sensor/proj/b"])

    # ------------------------------------------------------------------
    # Fusion stages
    # ------------------------------------------------------------------

    def level1_fusion(self, vis_tok: Tensor, sensor_toks: Tensor,
                      alpha: Tensor | None = None,
                      ) -> tuple[Tensor, Tensor, Tensor]:
        """Masked 13-token attention. Returns (Z, a_vis, attention)."""
        B, d = vis_tok.shape
        z0 = ad.concat([ad.reshape(vis_tok, (B, 1, d)), sensor_toks], axis=1)
        if z0.shape[1] != N_TOKENS:
            raise ad.ShapeError(f"expected {N_TOKENS} tokens, got {z0.shape[1]}")
        a = alpha if alpha is not None else self._params["alpha"]
        mask = ad.mul(a, ad.constant(-self.d_geo))
        g = self._params
        z, attn = ad.multi_head_attention(
            z0, g["fuse1/wq"], g["fuse1/wk"], g["fuse1/wv"], g["fuse1/wo"],
            self.cfg.heads, mask_add=mask)
        row = ad.reshape(ad.mean_pool(ad.slice_along(attn, 2, 0, 1), 1),
                         (B, N_TOKENS))
        sens = ad.slice_along(row, 1, 1, N_TOKENS)     # drop the self column
        a_vis = ad.div(sens, ad.sum_axis(sens, 1, keepdims=True))
        return z, a_vis, attn

    def level2_fusion(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Fused visual token vs pooled sensor summary; mean-pool to (B, d)."""
        vis = ad.slice_along(z, 1, 0, 1)
        sbar = ad.mean_pool(ad.slice_along(z, 1, 1, N_TOKENS), 1, keepdims=True)
        pair = ad.concat([vis, sbar], axis=1)
        g = self._params
        out, attn = ad.multi_head_attention(
            pair, g["fuse2/wq"], g["fuse2/wk"], g["fuse2/wv"], g["fuse2/wo"],
            self.cfg.heads)
        return ad.mean_pool(out, 1), attn

    def ume_head(self, h: Tensor) -> dict:
        g = self._params
        phi = ad.linear(h, g["head/phi/w"], g["head/phi/b"])
        r6 = ad.linear(h, g["head/rot/w"], g["head/rot/b"])
        rot = gram_schmidt_rotation(r6)
        t = ad.linear(h, g["head/t/w"], g["head/t/b"])
        sigma = ad.add(ad.softplus(ad.linear(h, g["head/sigma/w"],
                                             g["head/sigma/b"])),
                       ad.constant(np.full(N_LANDMARKS, self.cfg.sigma_floor)))
        return {"phi": phi, "R": rot, "t": t, "sigma": sigma}

    # ------------------------------------------------------------------
    # Full forward
    # ------------------------------------------------------------------

    def forward_batch(self, windows: np.ndarray, rasters: np.ndarray,
                      mode: str = "fused", drop_rng=None,
                      sensor_mask: np.ndarray | None = None) -> dict:
        """Run the network on a batch. sensor_mask (12,) bool replaces the
        flagged sensors' tokens with the learned null token, so masking all
        of them reproduces vision_only exactly."""
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        B = windows.shape[0] if mode != "vision_only" else rasters.shape[0]

        if mode == "imu_only":
            vis = _tile_token(self._params["null/vision"], (B,))
        else:
            vis = self.vision_encoder(rasters)

        if mode == "vision_only":
            sens = _tile_token(self._params["null/sensor"], (B, 12))
        else:
            sens = self.sensor_tokens(self.imu_encoder(windows))

        if mode == "fused" and drop_rng is not None:
            u = drop_rng.random()
            if u < self.cfg.drop_vision:
                vis = _tile_token(self._params["null/vision"], (B,))
            elif u < self.cfg.drop_vision + self.cfg.drop_imu:
                sens = _tile_token(self._params["null/sensor"], (B, 12))

        if sensor_mask is not None:
            sensor_mask = np.asarray(sensor_mask, dtype=bool)
            if sensor_mask.shape != (12,):
                raise ad.ShapeError(f"sensor_mask shape {sensor_mask.shape}")
            if sensor_mask.any():
                keep = ad.constant((~sensor_mask).astype(np.float64)[:, None])
                drop = ad.constant(sensor_mask.astype(np.float64)[:, None])
                nulls = _tile_token(self._params["null/sensor"], (B, 12))
                sens = ad.add(ad.mul(sens, keep), ad.mul(nulls, drop))

        z, a_vis, attn1 = self.level1_fusion(vis, sens)
        h, attn2 = self.level2_fusion(z)
        out = self.ume_head(h)
        out.update({"a_vis": a_vis, "attn1": attn1, "attn2": attn2, "mode": mode})
        return out

    def forward(self, sample, mode: str = "fused",
                sensor_mask: np.ndarray | None = None) -> FusionOutput:
        out = self.forward_batch(sample.window.data[None],
                                 sample.raster[None].astype(np.float64),
                                 mode=mode, sensor_mask=sensor_mask)
        return self.output_from_batch(out, 0)

    def output_from_batch(self, out: dict, i: int) -> FusionOutput:
        a_vis = out["a_vis"].value[i].copy()
        mode = out["mode"]
        return FusionOutput(
            pose=HandPose(out["phi"].value[i].copy(),
                          out["R"].value[i].copy(),
                          out["t"].value[i].copy()),
            sigma=out["sigma"].value[i].copy(),
            a_vis=a_vis,
            activated_sensors=a_vis >= self.cfg.activation_threshold,
            mode=mode,
            translation_valid=mode != "imu_only",
            a_vis_valid=mode != "vision_only",
        )

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------

    def loss_batch(self, out: dict, gt_phi: np.ndarray, gt_R: np.ndarray,
                   gt_t: np.ndarray) -> tuple[Tensor, dict]:
        gt_world = fk_world_batch(self.skeleton, gt_phi, gt_R, gt_t)
        world = world_landmarks(out["phi"], out["R"], out["t"], self.skeleton)
        nll = landmark_nll(world, out["sigma"], gt_world)
        ang = joint_angle_mse(out["phi"], gt_phi)
        total = ad.add(nll, ad.scale(ang, self.cfg.lambda_angle))
        return total, {"nll": float(nll.value), "angle": float(ang.value),
                       "total": float(total.value)}


# ---------------------------------------------------------------------------
# Differentiable kinematics and losses
# ---------------------------------------------------------------------------

def fk_landmarks(phi: Tensor, skeleton: HandSkeleton) -> Tensor:
    """Root-frame landmarks (B, 21, 3); gradient via the analytic Jacobian."""
    res = fk_root_batch(skeleton, phi.value)

    def backward(g):
        phi.accumulate(pull_back_landmark_grads(skeleton, res, g))
    return ad.custom(res.landmarks, (phi,), backward)


def world_landmarks(phi: Tensor, rot: Tensor, t: Tensor,
                    skeleton: HandSkeleton) -> Tensor:
    B = phi.shape[0]
    root = fk_landmarks(phi, skeleton)
    placed = ad.matmul(root, ad.transpose(rot, (0, 2, 1)))
    return ad.add(placed, ad.reshape(t, (B, 1, 3)))


def landmark_nll(world: Tensor, sigma: Tensor, gt_world: np.ndarray) -> Tensor:
    """Mean over the batch of sum_l [ |err|^2 / (2 sigma^2) + 3 log sigma ]."""
    B = world.shape[0]
    diff = ad.sub(world, ad.constant(gt_world))
    sq = ad.sum_axis(ad.mul(diff, diff), 2)            # (B, 21)
    per = ad.add(ad.div(sq, ad.scale(ad.mul(sigma, sigma), 2.0)),
                 ad.scale(ad.log(sigma), 3.0))
    return ad.scale(ad.sum_all(per), 1.0 / B)


def joint_angle_mse(phi: Tensor, gt_phi: np.ndarray) -> Tensor:
    B = phi.shape[0]
    diff = ad.sub(phi, ad.constant(gt_phi))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / (N_DOF * B))


def gram_schmidt_rotation(r6: Tensor) -> Tensor:
    """(B, 6) -> (B, 3, 3) with columns [b1, b2, b1 x b2]."""
    B = r6.shape[0]
    eps = ad.constant(np.full((B, 1), 1e-12))
    a1 = ad.slice_along(r6, 1, 0, 3)
    a2 = ad.slice_along(r6, 1, 3, 6)
    b1 = ad.div(a1, ad.add(ad.sqrt(ad.sum_axis(ad.mul(a1, a1), 1, True)), eps))
    dot = ad.sum_axis(ad.mul(b1, a2), 1, keepdims=True)
    u2 = ad.sub(a2, ad.mul(dot, b1))
    b2 = ad.div(u2, ad.add(ad.sqrt(ad.sum_axis(ad.mul(u2, u2), 1, True)), eps))
    b3 = ad.cross(b1, b2)
    cols = [ad.reshape(b, (B, 3, 1)) for b in (b1, b2, b3)]
    return ad.concat(cols, axis=2)


def landmark_nll_value(output: FusionOutput, gt_landmarks: np.ndarray,
                       skeleton: HandSkeleton) -> float:
    """Plain-number NLL of one prediction against ground-truth landmarks."""
    from .skeleton import forward_kinematics
    root = forward_kinematics(skeleton, HandPose(
        output.pose.angles, np.eye(3), np.zeros(3)))
    world = root @ output.pose.wrist_rotation.T + output.pose.wrist_translation
    sq = ((world - gt_landmarks) ** 2).sum(axis=1)
    return float(np.sum(sq / (2 * output.sigma ** 2) + 3 * np.log(output.sigma)))


def joint_angle_value(phi_pred: np.ndarray, phi_gt: np.ndarray) -> float:
    d = np.asarray(phi_pred) - np.asarray(phi_gt)
    return float((d * d).sum() / N_DOF)
