"""Image stream and attention-gated 2D-3D feature fusion.

The image stream mirrors the point stream's stride schedule so image and
point features stay pixel-aligned at every pyramid level (pseudo-LiDAR and
image pixels correspond one-to-one; no extrinsics needed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, conv1x1, conv2d, mul, relu, sigmoid
from .errors import ShapeError


@dataclass
class ImageLevel:
    """Per-level image features [H_l, W_l, C'_l] at a cumulative stride."""

    features: Tensor
    stride: int


def image_conv_level(img_in: Tensor, stride: int, w: Tensor, b: Tensor,
                     prev_stride: int = 1) -> ImageLevel:
    """One image-stream level: strided SAME conv2d + relu.

    The stride equals the point stream's sampling step at this level, so the
    output dims follow the same ceil arithmetic as stride sampling.
    """
    h = conv2d(img_in, w, stride=stride)
    h = relu(add(h, b))
    return ImageLevel(h, prev_stride * stride)


def fuse_2d3d(point_feats: Tensor, image_feats: Tensor, weights: dict,
              prefix: str, valid: np.ndarray) -> Tensor:
    """Gate image features into point features.

    w = sigmoid(conv2d(conv2d(G) + conv1x1(F))), shape [H, W, 1];
    fused = valid * (w * project(G)) + F, where project() is a learned 1x1
    channel projection of G to F's width so the sum is well-typed. Masking by
    the validity grid keeps invalid pixels at zero features.
    """
    if point_feats.shape[:2] != image_feats.shape[:2]:
        raise ShapeError("fuse_2d3d", point_feats.shape, image_feats.shape,
                         detail="point/image spatial dims must match")
    g_red = conv2d(image_feats, weights[f"{prefix}.gate_img.w"], stride=1)
    g_red = add(g_red, weights[f"{prefix}.gate_img.b"])
    f_red = conv1x1(point_feats, weights[f"{prefix}.gate_pt.w"],
                    weights[f"{prefix}.gate_pt.b"])
    pre = conv2d(add(g_red, f_red), weights[f"{prefix}.gate_out.w"], stride=1)
    pre = add(pre, weights[f"{prefix}.gate_out.b"])
    w = sigmoid(pre)  # [H, W, 1], strictly inside (0, 1)

    g_proj = conv1x1(image_feats, weights[f"{prefix}.proj.w"],
                     weights[f"{prefix}.proj.b"])
    gated = mul(mul(w, g_proj), Tensor(valid.astype(np.float64)[:, :, None]))
    return add(gated, point_feats)
