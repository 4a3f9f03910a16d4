from .blocks import BottleneckSEBlock, DPNBlock, ResNetBlock, SEModule
from .io import import_pretrained, load_model, save_model, translate_state_dict
from .unet import (
    DecoderStage,
    Encoder,
    EncoderKind,
    ModelConfig,
    SiameseUNet,
    build_model,
    count_parameters,
    upsample2x,
)

__all__ = [
    "BottleneckSEBlock", "DPNBlock", "ResNetBlock", "SEModule",
    "DecoderStage", "Encoder", "EncoderKind", "ModelConfig", "SiameseUNet",
    "build_model", "count_parameters", "upsample2x",
    "import_pretrained", "load_model", "save_model", "translate_state_dict",
]
