"""Supervised training: homoscedastic-weighted pose loss, Adam, LR schedule.

The per-level loss balances translation (l1) and rotation (l2 on normalized
quaternions) through two learnable log-variance scalars s_x and s_q; the
total loss is a fixed-weight sum over pyramid levels. Gradients accumulate
over a batch in a deterministic order before each optimizer step.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergedPoseError, PlvoError, ShapeError
from .geometry import quat_angle_deg, quat_normalize
from .posenet import build_params, full_forward
from .rng import XorShift64Star


def layer_loss(q_l, t_l, q_gt, t_gt, s_x, s_q) -> Tensor:
    """One pyramid level's loss:

        ||t_gt - t||_1 * exp(-s_x) + s_x + ||q_gt - q/||q|| ||_2 * exp(-s_q) + s_q
    """
    q_l, t_l = ad.as_tensor(q_l), ad.as_tensor(t_l)
    s_x, s_q = ad.as_tensor(s_x), ad.as_tensor(s_q)
    q_gt = np.asarray(q_gt, dtype=np.float64)
    if abs(np.linalg.norm(q_gt) - 1.0) > 1e-9:
        raise ValueError("ground-truth quaternion must be unit norm")
    t_err = ad.l1_norm(ad.sub(Tensor(np.asarray(t_gt, dtype=np.float64)), t_l))
    q_unit = ad.div(q_l, ad.l2_norm(q_l))
    q_err = ad.l2_norm(ad.sub(Tensor(q_gt), q_unit))
    t_term = ad.add(ad.mul(t_err, ad.exp(ad.neg(s_x))), s_x)
    q_term = ad.add(ad.mul(q_err, ad.exp(ad.neg(s_q))), s_q)
    return ad.add(t_term, q_term)


def total_loss(layer_losses, weights) -> Tensor:
    """Weighted sum over levels: sum_l a_l * loss_l."""
    if len(layer_losses) != len(weights):
        raise ShapeError("total_loss", (len(layer_losses),), (len(weights),),
                         detail="one weight per layer loss")
    out = None
    for ll, a in zip(layer_losses, weights):
        term = ad.mul(ad.as_tensor(ll), Tensor(np.float64(a)))
        out = term if out is None else ad.add(out, term)
    return out


def lr_schedule(epoch: int, lr0: float, decay_factor: float, decay_every: int,
                lr_floor: float) -> float:
    """Step decay clamped at the floor: max(floor, lr0 * f^(epoch // every))."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(lr_floor, lr0 * decay_factor ** (epoch // decay_every))


@dataclass
class AdamState:
    """First/second-moment buffers plus shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise PlvoError(f"adam_step: non-finite gradient for parameter {name!r}")
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        params[name].data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# training loop

def _pair_loss(params: dict, pair, cfg: dict):
    """Forward one frame pair and build the weighted multi-level loss."""
    pyr = full_forward(pair.img1, pair.img2, pair.pm1, pair.pm2, params,
                       cfg, pair.intr)
    weights = cfg["train"]["level_weights"]
    losses = [layer_loss(pyr.qs[l], pyr.ts[l], pair.gt_pose.q, pair.gt_pose.t,
                         params["loss.s_x"], params["loss.s_q"])
              for l in sorted(pyr.qs)]
    return total_loss(losses, weights), losses, pyr


def _shadow_params(params: dict) -> dict:
    """Per-sample tensors sharing storage with `params` but owning their grads.

    Lets forward/backward run concurrently on independent tapes without
    racing on the shared parameters' gradient buffers.
    """
    out = {}
    for k, p in params.items():
        s = Tensor.__new__(Tensor)
        s.data = p.data
        s.requires_grad = True
        s.grad = None
        s._parents = ()
        s._backward = None
        s._swept = False
        out[k] = s
    return out


def _sample_grads(params: dict, pair, cfg: dict):
    shadow = _shadow_params(params)
    loss, losses, _ = _pair_loss(shadow, pair, cfg)
    loss.backward()
    grads = {k: s.grad for k, s in shadow.items() if s.grad is not None}
    return float(loss.data), [float(l.data) for l in losses], grads


def evaluate_pairs(params: dict, pairs, cfg: dict):
    """Mean translation error (m, l2) and rotation geodesic error (deg)."""
    t_errs, r_errs = [], []
    for pair in pairs:
        _, _, pyr = _pair_loss(params, pair, cfg)
        pose = pyr.pose(min(pyr.qs))
        t_errs.append(float(np.linalg.norm(pose.t - pair.gt_pose.t)))
        r_errs.append(quat_angle_deg(pose.q, pair.gt_pose.q))
    return float(np.mean(t_errs)), float(np.mean(r_errs))


def train_model(cfg: dict, pairs, val_pairs=None, params: dict | None = None,
                log_rows: list | None = None, progress=None):
    """Train on frame pairs; returns (params, log rows).

    Log rows carry (epoch, lr, mean total loss, per-level means, val errors).
    early_stop_* in cfg["train"], when nonzero, stop once the training pairs'
    mean errors drop below the thresholds (checked every early_stop_every
    epochs).
    """
    tc = cfg["train"]
    if params is None:
        params = build_params(cfg)
    state = AdamState.init(params)
    order_rng = XorShift64Star(cfg["seed"]).spawn(7)
    threads = max(1, int(cfg.get("threads", 1)))
    L = len(tc["level_weights"])

    for epoch in range(tc["epochs"]):
        lr = lr_schedule(epoch, tc["lr"], tc["decay_factor"], tc["decay_every"],
                         tc["lr_floor"])
        order = np.arange(len(pairs))
        order_rng.shuffle(order)
        epoch_loss, epoch_levels, n_batches = 0.0, np.zeros(L), 0
        for lo in range(0, len(order), tc["batch"]):
            batch = [pairs[i] for i in order[lo:lo + tc["batch"]]]

            def safe_grads(pr):
                try:
                    return _sample_grads(params, pr, cfg)
                except DivergedPoseError:
                    return None

            if threads > 1 and len(batch) > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(pool.map(safe_grads, batch))
            else:
                results = [safe_grads(pr) for pr in batch]
            skipped = sum(r is None for r in results)
            results = [r for r in results if r is not None]
            if not results:
                raise DivergedPoseError(
                    f"epoch {epoch}: every sample in a batch diverged")
            if skipped and progress is not None:
                progress({"epoch": epoch, "lr": lr,
                          "loss": float("nan"), "level_losses": [],
                          "val_t_err": "", "val_r_err": "",
                          "note": f"skipped {skipped} diverged sample(s)"})
            # deterministic fixed-order reduction, then batch mean
            grads: dict[str, np.ndarray] = {}
            for _, _, g in results:
                for k, v in g.items():
                    if k in grads:
                        grads[k] += v
                    else:
                        grads[k] = v.copy()
            for k in grads:
                grads[k] /= len(batch)
            adam_step(params, grads, state, lr,
                      beta1=tc["beta1"], beta2=tc["beta2"], eps=tc["adam_eps"])
            epoch_loss += float(np.mean([r[0] for r in results]))
            epoch_levels += np.mean([r[1] for r in results], axis=0)
            n_batches += 1

        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": epoch_loss / n_batches,
            "level_losses": (epoch_levels / n_batches).tolist(),
            "val_t_err": "",
            "val_r_err": "",
        }
        if val_pairs:
            vt, vr = evaluate_pairs(params, val_pairs, cfg)
            row["val_t_err"], row["val_r_err"] = vt, vr
        if log_rows is not None:
            log_rows.append(row)
        if progress is not None:
            progress(row)

        every = int(tc.get("early_stop_every", 0))
        if every and (epoch + 1) % every == 0:
            tt, rr = evaluate_pairs(params, pairs, cfg)
            if tt < tc["early_stop_t"] and rr < tc["early_stop_r"]:
                break
    return params, log_rows


def write_train_log(path, log_rows, n_levels: int):
    header = ["epoch", "lr", "loss"] + [f"loss_l{i + 1}" for i in range(n_levels)] \
        + ["val_t_err_m", "val_r_err_deg"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in log_rows:
            cells = [str(row["epoch"]), f"{row['lr']:.10g}", f"{row['loss']:.10g}"]
            cells += [f"{v:.10g}" for v in row["level_losses"]]
            cells += [f"{row['val_t_err']:.10g}" if row["val_t_err"] != "" else "",
                      f"{row['val_r_err']:.10g}" if row["val_r_err"] != "" else ""]
            fh.write(",".join(cells) + "\n")
