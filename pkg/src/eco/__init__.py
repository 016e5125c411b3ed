"""Prompt-ensemble context optimization for frozen text encoders.

Learns D prompts of N context vectors each against a frozen transformer text
encoder, classifies embedding vectors by temperature-scaled cosine softmax,
and averages per-prompt class features into precomputable prototypes.
"""

from .classifier import (
    ClassifierConfig,
    LossGrad,
    class_probabilities,
    cross_entropy,
    linear_probe,
    predict,
    predict_batch,
    zero_shot_baseline,
)
from .data_io import (
    EmbeddingBank,
    SynthSpec,
    generate_synthetic,
    load_checkpoint,
    load_prototypes,
    read_bank,
    read_weights,
    save_checkpoint,
    save_prototypes,
    write_bank,
    write_weights,
)
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    embed_tokens,
    encode_backward,
    encode_sequence,
    init_random,
)
from .numerics import SeededRng, finite_difference_grad
from .prompts import (
    ClassTokenTable,
    PromptEnsemble,
    PrototypeBank,
    SpecialTokens,
    assemble_sequence,
    ensemble_class_features,
    init_context,
    precompute_prototypes,
    scatter_feature_grads,
)
from .trainer import (
    FewShotSplit,
    RunReport,
    TrainConfig,
    evaluate,
    sample_few_shot,
    sweep,
    train,
)

__version__ = "0.1.0"
