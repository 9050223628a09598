"""Desk-scale multimodal video-grounded dialogue model with scene-graph fusion."""

from .tensor import Tensor, set_mode, get_mode
from .scenegraph import FrameGraph, SceneGraph, RNGraph, rn_transform
from .lm import Vocab, LMConfig, MiniBart
from .gvp import GVP, FeatureTrack
from .pointer import PointerNetwork, pointer_values, mix
from .model import ModelConfig, MsgBart, beam_search, greedy_search
from .data import WorldConfig, generate_world, save_corpus, load_corpus
from .metrics import bleu, rouge_l, EvalReport

__version__ = "0.1.0"
