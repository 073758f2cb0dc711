"""Contrastive term embeddings from a concept dictionary and relation graph."""

from .contrastive import MsLossParams, total_loss
from .encoder import EncoderDims, EncoderParams, load_checkpoint, save_checkpoint
from .kg_store import ConceptDictionary, RelationStore, load_concepts, load_relations
from .normalizer import EmbeddingIndex, Normalizer, build_index
from .tokenizer import Vocab, load_vocab, tokenize
from .trainer import TrainConfig, grad_check, train

__version__ = "0.1.0"
