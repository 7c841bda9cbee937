"""Desk-scale machine translation lab.

Masked-LM encoder pretraining, four encoder-integration strategies for
transformer NMT (baseline / emb / ft / freeze), synthetic-noise robustness
test sets, and BLEU / sentence-chrF / delta-chrF evaluation, all on a small
self-contained float32 autodiff core.
"""

from .bpe import BpeModel, apply_bpe, debpe, learn_bpe
from .corpus import (
    FrequencyTable,
    ParallelPair,
    TokenBatch,
    build_frequency_table,
    load_mono,
    load_parallel,
    make_batches,
)
from .metrics import (
    ChrfParams,
    DeltaChrfRecord,
    EvalReport,
    corpus_bleu,
    delta_chrf,
    read_report,
    sentence_chrf,
    write_report,
)
from .nmt import (
    BeamConfig,
    IntegrationStrategy,
    NmtModel,
    beam_search,
    build_model,
    train_nmt,
    translate_file,
)
from .noise import NoiseSpec, NoisyTestSet, measure_noise_rate, noisify
from .pretrain import (
    LrSchedule,
    MaskPlan,
    apply_masking,
    masked_lm_loss,
    sample_mask_positions,
    train_masked_lm,
)
from .tensor import NumericsError, Tensor, adam_step, backward
from .transformer import (
    Checkpoint,
    ModelConfig,
    average_checkpoints,
    decode_train,
    encode,
    init_params,
    load_checkpoint,
    nmt_loss,
    preset_config,
    save_checkpoint,
)

__version__ = "0.1.0"
