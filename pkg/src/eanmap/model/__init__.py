"""Decoder: query units, grouped local self-attention, BEV sampling, prediction heads."""

from eanmap.model.decoder import Decoder, DecoderConfig, DecoderHooks, DetectionSet, decoder_forward

__all__ = ["Decoder", "DecoderConfig", "DecoderHooks", "DetectionSet", "decoder_forward"]
