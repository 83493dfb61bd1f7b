"""Continual generative retrieval with expandable mixture-of-LoRA experts
and residual-quantization docids."""

__version__ = "0.1.0"

from .rq import (
    RQCodebooks,
    DocId,
    VocabLayout,
    train_codebooks,
    encode,
    encode_batch,
    assign_unique_docids,
    position_mask,
    apply_mask,
)
from .mixlora import (
    LoRAExpertPair,
    Router,
    MixLoRALayer,
    router_logits,
    gate_topk,
    mixlora_forward,
    load_balance_loss,
    router_aux_loss,
    expand_layer,
)
from .ood import ExpansionPolicy, OODScanReport, energy_score, update_ema, scan_corpus, expansion_decision
from .model import TransformerConfig, Seq2SeqModel, inject_mixlora
from .losses import ce_loss, kl_loss, total_loss
from .training import Hyper, AdamW, train_step, run_training, NumericalError
from .decoding import DocIdTrie, constrained_beam_search, retrieve
from .checkpoint import save_checkpoint, load_checkpoint
from .data import DataConfig, DynamicCorpora, generate_corpora
from .metrics import recall_at_k, mrr_at_k, MetricsMatrix, cl_metrics, ap_t, bwt_t, fwt_t
