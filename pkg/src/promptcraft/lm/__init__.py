from .checkpoint import Checkpoint, load_checkpoint, params_digest, save_checkpoint
from .model import ModelConfig, TransformerParams, forward, hidden_states
from .sampling import Sample, SamplerConfig, greedy, sample, sample_batch
from .tokenizer import BOS, EOS, PAD, SEP, VOCAB_SIZE, ByteTokenizer, decode, encode

__all__ = [
    "BOS", "EOS", "PAD", "SEP", "VOCAB_SIZE",
    "ByteTokenizer", "Checkpoint", "ModelConfig", "Sample", "SamplerConfig", "TransformerParams",
    "decode", "encode", "forward", "greedy", "hidden_states",
    "load_checkpoint", "params_digest", "sample", "sample_batch", "save_checkpoint",
]
