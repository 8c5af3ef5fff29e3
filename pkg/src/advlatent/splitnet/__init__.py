"""Split classifiers into mobile and local halves, with bottlenecks and latent codecs."""

from .codecs import (
    CODEC_KINDS,
    CodecError,
    CompressionCodec,
    apply_codec,
    dequantize_latent,
    entropy_code_latent,
    entropy_decode_latent,
    jpeg_code_latent,
    jpeg_decode_latent,
    parse_codec,
    quantization_step,
    quantize_latent,
)
from .models import ARCHITECTURES, VGG_MNIST_KWARGS, ArchSpec, GraphError, ModelGraph, feature_split_index, mnist_cnn, vgg_cifar
from .package import PackageError, build_split, load_package, read_manifest, save_package
from .split import (
    Bottleneck,
    SplitError,
    SplitModel,
    attach_bottleneck,
    attach_codec,
    calibrate_codec,
    forward_local,
    forward_mobile,
    split_model,
)
from .training import (
    STRATEGIES,
    BottleneckTrainingStrategy,
    TrainingError,
    TrainingReport,
    accuracy,
    predict_logits,
    train_bottleneck,
    train_classifier,
)

__all__ = [
    "ARCHITECTURES",
    "CODEC_KINDS",
    "STRATEGIES",
    "VGG_MNIST_KWARGS",
    "ArchSpec",
    "Bottleneck",
    "BottleneckTrainingStrategy",
    "CodecError",
    "CompressionCodec",
    "GraphError",
    "ModelGraph",
    "PackageError",
    "SplitError",
    "SplitModel",
    "TrainingError",
    "TrainingReport",
    "accuracy",
    "apply_codec",
    "attach_bottleneck",
    "attach_codec",
    "build_split",
    "calibrate_codec",
    "dequantize_latent",
    "entropy_code_latent",
    "entropy_decode_latent",
    "feature_split_index",
    "forward_local",
    "forward_mobile",
    "jpeg_code_latent",
    "jpeg_decode_latent",
    "load_package",
    "mnist_cnn",
    "parse_codec",
    "predict_logits",
    "quantization_step",
    "quantize_latent",
    "read_manifest",
    "save_package",
    "split_model",
    "train_bottleneck",
    "train_classifier",
    "vgg_cifar",
]
