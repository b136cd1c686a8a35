"""Map DINO-family torch checkpoints onto the interchange tensor schema.

Checkpoint names follow the public DINOv2 layout (``patch_embed.proj.*``,
``blocks.N.attn.qkv.*``, ``blocks.N.ls1.gamma``, ...). Three reshapes carry
semantic weight:

* conv patch embeddings (D, C, p, p) become row-vector matrices over patches
  flattened in (row, col, channel) order, so the kernel is permuted to
  (D, p, p, C) before flattening,
* the CLS positional embedding is folded into the CLS token and the
  interchange ``pos_embed`` covers patch tokens only,
* LayerScale gammas are folded into the attention/MLP output projections
  (exact: the scale is a per-channel multiply after those projections).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .torchvit import TorchViT


class MappingError(ValueError):
    pass


def _get(sd: dict, name: str) -> torch.Tensor:
    if name not in sd:
        raise MappingError(f"checkpoint is missing tensor {name!r}")
    return sd[name].detach().to(torch.float32)


def interpolate_pos_embed(pos: torch.Tensor, src_side: int, dst_side: int) -> torch.Tensor:
    """Bicubic-resample the patch positional grid; CLS entry passes through."""
    if src_side == dst_side:
        return pos
    cls_pos, patch_pos = pos[:, :1], pos[:, 1:]
    dim = pos.shape[-1]
    grid = patch_pos.reshape(1, src_side, src_side, dim).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(dst_side, dst_side), mode="bicubic",
                         align_corners=False)
    patch_pos = grid.permute(0, 2, 3, 1).reshape(1, dst_side * dst_side, dim)
    return torch.cat([cls_pos, patch_pos], dim=1)


def dinov2_to_interchange(sd: dict, config: dict) -> tuple[dict, list[tuple[str, str]]]:
    """Returns (interchange tensors, mapping table of (source, target) names)."""
    p = config["patch_size"]
    d = config["embed_dim"]
    depth = config["depth"]
    r = config["registers"]
    channels = config.get("channels", 3)
    side = config["window"] // p
    n = side * side
    table: list[tuple[str, str]] = []
    out: dict[str, np.ndarray] = {}

    def put(dst: str, value: torch.Tensor, src: str):
        out[dst] = value.numpy().astype(np.float32)
        table.append((src, dst))

    conv_w = _get(sd, "patch_embed.proj.weight")
    if conv_w.shape != (d, channels, p, p):
        raise MappingError(
            f"patch_embed.proj.weight has shape {tuple(conv_w.shape)}, "
            f"expected {(d, channels, p, p)}"
        )
    put("patch_proj_w", conv_w.permute(0, 2, 3, 1).reshape(d, p * p * channels),
        "patch_embed.proj.weight")
    put("patch_proj_b", _get(sd, "patch_embed.proj.bias"), "patch_embed.proj.bias")

    pos = _get(sd, "pos_embed")
    src_n = pos.shape[1] - 1
    src_side = int(round(src_n**0.5))
    if src_side * src_side != src_n:
        raise MappingError(f"pos_embed holds {src_n} patch entries, not a square grid")
    pos = interpolate_pos_embed(pos, src_side, side)
    cls = _get(sd, "cls_token").reshape(d)
    put("cls_token", cls + pos[0, 0], "cls_token (+ pos_embed[0])")
    put("pos_embed", pos[0, 1:], "pos_embed[1:]")
    if r:
        regs = _get(sd, "register_tokens").reshape(r, d)
    else:
        regs = torch.zeros(0, d)
    put("register_tokens", regs, "register_tokens")

    for i in range(depth):
        base = f"blocks.{i}"
        qkv_w = _get(sd, f"{base}.attn.qkv.weight")  # (3D, D)
        qkv_b = _get(sd, f"{base}.attn.qkv.bias")
        if qkv_w.shape != (3 * d, d):
            raise MappingError(
                f"{base}.attn.qkv.weight has shape {tuple(qkv_w.shape)}, expected {(3 * d, d)}"
            )
        for j, which in enumerate("qkv"):
            put(f"block{i}/w{which}", qkv_w[j * d : (j + 1) * d].T,
                f"{base}.attn.qkv.weight[{which}].T")
            put(f"block{i}/b{which}", qkv_b[j * d : (j + 1) * d],
                f"{base}.attn.qkv.bias[{which}]")
        ls1 = _get(sd, f"{base}.ls1.gamma") if f"{base}.ls1.gamma" in sd else torch.ones(d)
        ls2 = _get(sd, f"{base}.ls2.gamma") if f"{base}.ls2.gamma" in sd else torch.ones(d)
        put(f"block{i}/wo", _get(sd, f"{base}.attn.proj.weight").T * ls1[None, :],
            f"{base}.attn.proj.weight.T (* ls1)")
        put(f"block{i}/bo", _get(sd, f"{base}.attn.proj.bias") * ls1,
            f"{base}.attn.proj.bias (* ls1)")
        put(f"block{i}/ln1_scale", _get(sd, f"{base}.norm1.weight"), f"{base}.norm1.weight")
        put(f"block{i}/ln1_offset", _get(sd, f"{base}.norm1.bias"), f"{base}.norm1.bias")
        put(f"block{i}/ln2_scale", _get(sd, f"{base}.norm2.weight"), f"{base}.norm2.weight")
        put(f"block{i}/ln2_offset", _get(sd, f"{base}.norm2.bias"), f"{base}.norm2.bias")
        put(f"block{i}/mlp_w1", _get(sd, f"{base}.mlp.fc1.weight").T, f"{base}.mlp.fc1.weight.T")
        put(f"block{i}/mlp_b1", _get(sd, f"{base}.mlp.fc1.bias"), f"{base}.mlp.fc1.bias")
        put(f"block{i}/mlp_w2", _get(sd, f"{base}.mlp.fc2.weight").T * ls2[None, :],
            f"{base}.mlp.fc2.weight.T (* ls2)")
        put(f"block{i}/mlp_b2", _get(sd, f"{base}.mlp.fc2.bias") * ls2,
            f"{base}.mlp.fc2.bias (* ls2)")

    if "norm.weight" in sd:
        put("final_norm_scale", _get(sd, "norm.weight"), "norm.weight")
        put("final_norm_offset", _get(sd, "norm.bias"), "norm.bias")
    if "head.weight" in sd:
        put("image_classifier_w", _get(sd, "head.weight"), "head.weight")
        put("image_classifier_b", _get(sd, "head.bias"), "head.bias")

    expected_patch_entries = n
    if out["pos_embed"].shape != (expected_patch_entries, d):
        raise MappingError(
            f"pos_embed mapped to shape {out['pos_embed'].shape}, "
            f"expected {(expected_patch_entries, d)}"
        )
    return out, table


def torchvit_state_dict(model: TorchViT) -> dict:
    """TorchViT parameters under the public DINOv2-style names."""
    sd = {}
    own = model.state_dict()
    sd["patch_embed.proj.weight"] = own["patch_embed.weight"]
    sd["patch_embed.proj.bias"] = own["patch_embed.bias"]
    sd["cls_token"] = own["cls_token"]
    sd["register_tokens"] = own["register_tokens"]
    sd["pos_embed"] = own["pos_embed"]
    for i in range(len(model.blocks)):
        sd[f"blocks.{i}.norm1.weight"] = own[f"blocks.{i}.norm1.weight"]
        sd[f"blocks.{i}.norm1.bias"] = own[f"blocks.{i}.norm1.bias"]
        sd[f"blocks.{i}.attn.qkv.weight"] = own[f"blocks.{i}.qkv.weight"]
        sd[f"blocks.{i}.attn.qkv.bias"] = own[f"blocks.{i}.qkv.bias"]
        sd[f"blocks.{i}.attn.proj.weight"] = own[f"blocks.{i}.proj.weight"]
        sd[f"blocks.{i}.attn.proj.bias"] = own[f"blocks.{i}.proj.bias"]
        if f"blocks.{i}.ls1" in own:
            sd[f"blocks.{i}.ls1.gamma"] = own[f"blocks.{i}.ls1"]
            sd[f"blocks.{i}.ls2.gamma"] = own[f"blocks.{i}.ls2"]
        sd[f"blocks.{i}.norm2.weight"] = own[f"blocks.{i}.norm2.weight"]
        sd[f"blocks.{i}.norm2.bias"] = own[f"blocks.{i}.norm2.bias"]
        sd[f"blocks.{i}.mlp.fc1.weight"] = own[f"blocks.{i}.fc1.weight"]
        sd[f"blocks.{i}.mlp.fc1.bias"] = own[f"blocks.{i}.fc1.bias"]
        sd[f"blocks.{i}.mlp.fc2.weight"] = own[f"blocks.{i}.fc2.weight"]
        sd[f"blocks.{i}.mlp.fc2.bias"] = own[f"blocks.{i}.fc2.bias"]
    if model.norm is not None:
        sd["norm.weight"] = own["norm.weight"]
        sd["norm.bias"] = own["norm.bias"]
    if model.head is not None:
        sd["head.weight"] = own["head.weight"]
        sd["head.bias"] = own["head.bias"]
    return sd


def interchange_to_torch_model(tensors: dict, config: dict) -> TorchViT:
    """Rebuild a torch model from an interchange file (LayerScale already folded)."""
    model = TorchViT(
        patch_size=config["patch_size"], embed_dim=config["embed_dim"],
        depth=config["depth"], heads=config["heads"], registers=config["registers"],
        window=config["window"], channels=config.get("channels", 3),
        mlp_ratio=config.get("mlp_ratio", 4), layerscale=False,
        final_norm="final_norm_scale" in tensors,
        classifier_classes=(tensors["image_classifier_w"].shape[0]
                            if "image_classifier_w" in tensors else None),
    )
    d = config["embed_dim"]
    p = config["patch_size"]
    channels = config.get("channels", 3)

    def t(name):
        # np.array copies: read_tensors returns read-only buffer views
        return torch.from_numpy(np.array(tensors[name]))

    own = {}
    own["patch_embed.weight"] = t("patch_proj_w").reshape(d, p, p, channels).permute(0, 3, 1, 2)
    own["patch_embed.bias"] = t("patch_proj_b")
    own["cls_token"] = t("cls_token").reshape(1, 1, d)
    own["register_tokens"] = t("register_tokens").reshape(1, -1, d)
    # interchange pos covers patches only; the CLS slot becomes zero because
    # its positional term was folded into the token itself
    own["pos_embed"] = torch.cat([torch.zeros(1, 1, d), t("pos_embed")[None]], dim=1)
    for i in range(config["depth"]):
        own[f"blocks.{i}.norm1.weight"] = t(f"block{i}/ln1_scale")
        own[f"blocks.{i}.norm1.bias"] = t(f"block{i}/ln1_offset")
        own[f"blocks.{i}.qkv.weight"] = torch.cat(
            [t(f"block{i}/wq").T, t(f"block{i}/wk").T, t(f"block{i}/wv").T], dim=0
        )
        own[f"blocks.{i}.qkv.bias"] = torch.cat(
            [t(f"block{i}/bq"), t(f"block{i}/bk"), t(f"block{i}/bv")]
        )
        own[f"blocks.{i}.proj.weight"] = t(f"block{i}/wo").T
        own[f"blocks.{i}.proj.bias"] = t(f"block{i}/bo")
        own[f"blocks.{i}.norm2.weight"] = t(f"block{i}/ln2_scale")
        own[f"blocks.{i}.norm2.bias"] = t(f"block{i}/ln2_offset")
        own[f"blocks.{i}.fc1.weight"] = t(f"block{i}/mlp_w1").T
        own[f"blocks.{i}.fc1.bias"] = t(f"block{i}/mlp_b1")
        own[f"blocks.{i}.fc2.weight"] = t(f"block{i}/mlp_w2").T
        own[f"blocks.{i}.fc2.bias"] = t(f"block{i}/mlp_b2")
    if model.norm is not None:
        own["norm.weight"] = t("final_norm_scale")
        own["norm.bias"] = t("final_norm_offset")
    if model.head is not None:
        own["head.weight"] = t("image_classifier_w")
        own["head.bias"] = t("image_classifier_b")
    model.load_state_dict(own)
    model.eval()
    return model


def load_dinov2_state_dict(model: TorchViT, sd: dict) -> TorchViT:
    """Load a DINOv2-named state dict into the torch reference model."""
    own = {}
    own["patch_embed.weight"] = _get(sd, "patch_embed.proj.weight")
    own["patch_embed.bias"] = _get(sd, "patch_embed.proj.bias")
    own["cls_token"] = _get(sd, "cls_token")
    own["register_tokens"] = _get(sd, "register_tokens")
    own["pos_embed"] = _get(sd, "pos_embed")
    for i in range(len(model.blocks)):
        own[f"blocks.{i}.norm1.weight"] = _get(sd, f"blocks.{i}.norm1.weight")
        own[f"blocks.{i}.norm1.bias"] = _get(sd, f"blocks.{i}.norm1.bias")
        own[f"blocks.{i}.qkv.weight"] = _get(sd, f"blocks.{i}.attn.qkv.weight")
        own[f"blocks.{i}.qkv.bias"] = _get(sd, f"blocks.{i}.attn.qkv.bias")
        own[f"blocks.{i}.proj.weight"] = _get(sd, f"blocks.{i}.attn.proj.weight")
        own[f"blocks.{i}.proj.bias"] = _get(sd, f"blocks.{i}.attn.proj.bias")
        if model.blocks[i].ls1 is not None:
            own[f"blocks.{i}.ls1"] = _get(sd, f"blocks.{i}.ls1.gamma")
            own[f"blocks.{i}.ls2"] = _get(sd, f"blocks.{i}.ls2.gamma")
        own[f"blocks.{i}.norm2.weight"] = _get(sd, f"blocks.{i}.norm2.weight")
        own[f"blocks.{i}.norm2.bias"] = _get(sd, f"blocks.{i}.norm2.bias")
        own[f"blocks.{i}.fc1.weight"] = _get(sd, f"blocks.{i}.mlp.fc1.weight")
        own[f"blocks.{i}.fc1.bias"] = _get(sd, f"blocks.{i}.mlp.fc1.bias")
        own[f"blocks.{i}.fc2.weight"] = _get(sd, f"blocks.{i}.mlp.fc2.weight")
        own[f"blocks.{i}.fc2.bias"] = _get(sd, f"blocks.{i}.mlp.fc2.bias")
    if model.norm is not None:
        own["norm.weight"] = _get(sd, "norm.weight")
        own["norm.bias"] = _get(sd, "norm.bias")
    if model.head is not None:
        own["head.weight"] = _get(sd, "head.weight")
        own["head.bias"] = _get(sd, "head.bias")
    model.load_state_dict(own)
    model.eval()
    return model
