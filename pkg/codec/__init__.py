from .services import Codec, EncodedMessage, decode, encode, transform

__all__ = ['Codec', 'EncodedMessage', 'decode', 'encode', 'transform']
