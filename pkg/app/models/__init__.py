from .msvlm import MSVLM, load_msvlm
from .tokenizer import Tokenizer

__all__ = ['MSVLM', 'Tokenizer', 'load_msvlm']
