import numpy as np
import pytest
import torch
from PIL import Image

from tiny_model import CLASS_NAMES, IMAGE_SIZE, HEADS, LAYERS, MAX_POS, PROJ_DIM, WIDTH, build_tokenizer


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """A small randomly initialized CLIP checkpoint saved to disk."""
    from transformers import CLIPConfig, CLIPModel, CLIPTextConfig, CLIPVisionConfig

    tokenizer = build_tokenizer()
    text = CLIPTextConfig(
        vocab_size=len(tokenizer),
        hidden_size=WIDTH,
        intermediate_size=4 * WIDTH,
        num_hidden_layers=LAYERS,
        num_attention_heads=HEADS,
        max_position_embeddings=MAX_POS,
        hidden_act="quick_gelu",
        bos_token_id=tokenizer.bos_token_id,
        eos_token_id=tokenizer.eos_token_id,
    )
    vision = CLIPVisionConfig(
        hidden_size=WIDTH,
        intermediate_size=4 * WIDTH,
        num_hidden_layers=LAYERS,
        num_attention_heads=HEADS,
        image_size=IMAGE_SIZE,
        patch_size=8,
        hidden_act="quick_gelu",
    )
    config = CLIPConfig(
        text_config=text.to_dict(), vision_config=vision.to_dict(), projection_dim=PROJ_DIM
    )
    torch.manual_seed(7)
    model = CLIPModel(config)
    out = tmp_path_factory.mktemp("checkpoint")
    model.save_pretrained(out)
    tokenizer.save_pretrained(out)
    return out


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Class-folder image tree: 4 valid PNGs per class plus one corrupt file."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(3)
    for name in CLASS_NAMES:
        folder = root / name
        folder.mkdir()
        for i in range(4):
            arr = rng.integers(0, 256, size=(IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
            Image.fromarray(arr).save(folder / f"{i}.png")
    (root / CLASS_NAMES[0] / "broken.png").write_bytes(b"not an image")
    return root


@pytest.fixture(scope="session")
def classes_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("meta") / "classes.txt"
    path.write_text("\n".join(CLASS_NAMES) + "\n")
    return path
