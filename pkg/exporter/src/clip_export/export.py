"""Export a CLIP checkpoint into the consumer's file formats.

The text tower becomes a tensor manifest under the consumer's naming schema
(token_table, positional, blocks.{i}.*, final.*, projection), with the
tokenizer's start/end ids recorded in metadata. Dataset images are pushed
through the frozen vision tower and written as an embedding bank whose class
table carries BPE-tokenized class names.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .formats import write_bank, write_manifest

log = logging.getLogger(__name__)

# vision preprocessing constants of the source framework
IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def feature_tensor(output) -> torch.Tensor:
    """get_*_features returns a tensor or, in newer versions, a pooled output."""
    return output if isinstance(output, torch.Tensor) else output.pooler_output


class ArchitectureError(ValueError):
    """Checkpoint shape that cannot be expressed in the manifest schema."""


@dataclass
class ExportJob:
    model_dir: str
    dataset_dir: str | None = None
    class_names: list[str] = field(default_factory=list)


def _load(model_dir: str):
    from transformers import AutoTokenizer, CLIPModel

    model = CLIPModel.from_pretrained(model_dir)
    model.eval()
    tokenizer = AutoTokenizer.from_pretrained(model_dir)
    return model, tokenizer


def _text_tower_tensors(model) -> tuple[dict[str, np.ndarray], dict]:
    cfg = model.config.text_config
    width = cfg.hidden_size
    if cfg.intermediate_size != 4 * width:
        raise ArchitectureError(
            f"MLP width {cfg.intermediate_size} is not 4x the model width {width}"
        )
    if width % cfg.num_attention_heads != 0:
        raise ArchitectureError(
            f"width {width} not divisible by {cfg.num_attention_heads} heads"
        )
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}

    def linear(prefix):
        # torch stores Linear weight as (out, in); the consumer right-multiplies
        return state[prefix + ".weight"].T.copy(), state[prefix + ".bias"].copy()

    tensors: dict[str, np.ndarray] = {
        "token_table": state["text_model.embeddings.token_embedding.weight"],
        "positional": state["text_model.embeddings.position_embedding.weight"],
        "final.gain": state["text_model.final_layer_norm.weight"],
        "final.bias": state["text_model.final_layer_norm.bias"],
        "projection": state["text_projection.weight"].T.copy(),
    }
    for i in range(cfg.num_hidden_layers):
        src = f"text_model.encoder.layers.{i}."
        dst = f"blocks.{i}."
        q_w, q_b = linear(src + "self_attn.q_proj")
        k_w, k_b = linear(src + "self_attn.k_proj")
        v_w, v_b = linear(src + "self_attn.v_proj")
        out_w, out_b = linear(src + "self_attn.out_proj")
        fc_w, fc_b = linear(src + "mlp.fc1")
        proj_w, proj_b = linear(src + "mlp.fc2")
        tensors.update(
            {
                dst + "ln1.gain": state[src + "layer_norm1.weight"],
                dst + "ln1.bias": state[src + "layer_norm1.bias"],
                dst + "attn.qkv_w": np.concatenate([q_w, k_w, v_w], axis=1),
                dst + "attn.qkv_b": np.concatenate([q_b, k_b, v_b]),
                dst + "attn.out_w": out_w,
                dst + "attn.out_b": out_b,
                dst + "ln2.gain": state[src + "layer_norm2.weight"],
                dst + "ln2.bias": state[src + "layer_norm2.bias"],
                dst + "mlp.fc_w": fc_w,
                dst + "mlp.fc_b": fc_b,
                dst + "mlp.proj_w": proj_w,
                dst + "mlp.proj_b": proj_b,
            }
        )
    metadata = {
        "kind": "encoder_weights",
        "layers": cfg.num_hidden_layers,
        "heads": cfg.num_attention_heads,
        "model_width": width,
        "output_dim": model.config.projection_dim,
        "max_positions": cfg.max_position_embeddings,
        "vocab_size": cfg.vocab_size,
        "eps": cfg.layer_norm_eps,
    }
    return tensors, metadata


def export_text_tower(job: ExportJob) -> bytes:
    model, tokenizer = _load(job.model_dir)
    tensors, metadata = _text_tower_tensors(model)
    metadata["sot_id"] = int(tokenizer.bos_token_id)
    metadata["eot_id"] = int(tokenizer.eos_token_id)
    metadata["source_model"] = str(job.model_dir)
    return write_manifest(tensors, metadata)


def tokenize_classes(tokenizer, class_names: list[str]) -> list[list[int]]:
    """BPE token ids per class name, without start/end markers."""
    return [
        [int(t) for t in tokenizer(name, add_special_tokens=False)["input_ids"]]
        for name in class_names
    ]


def preprocess_image(image: Image.Image, size: int) -> np.ndarray:
    """Resize to the square input resolution and normalize channelwise."""
    image = image.convert("RGB").resize((size, size), Image.BICUBIC)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGE_MEAN, np.float32)) / np.asarray(IMAGE_STD, np.float32)
    return arr.transpose(2, 0, 1)  # HWC -> CHW


def export_embeddings(job: ExportJob, batch_size: int = 16) -> tuple[bytes, int]:
    """Encode every class-folder image; returns (bank bytes, skipped count)."""
    if job.dataset_dir is None:
        raise ValueError("embedding export needs a dataset directory")
    if not job.class_names:
        raise ValueError("embedding export needs class names")
    model, tokenizer = _load(job.model_dir)
    size = model.config.vision_config.image_size

    images, labels = [], []
    skipped = 0
    root = Path(job.dataset_dir)
    for label, name in enumerate(job.class_names):
        folder = root / name
        if not folder.is_dir():
            raise FileNotFoundError(f"no class folder {folder}")
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as img:
                    images.append(preprocess_image(img, size))
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            labels.append(label)

    vectors = np.zeros((len(images), model.config.projection_dim), np.float32)
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.stack(images[start : start + batch_size]))
            feats = feature_tensor(model.get_image_features(pixel_values=chunk))
            vectors[start : start + len(chunk)] = feats.numpy()

    token_ids = tokenize_classes(tokenizer, job.class_names)
    bank = write_bank(job.class_names, token_ids, np.asarray(labels), vectors)
    return bank, skipped
