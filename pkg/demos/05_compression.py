"""Compressing the transmitted latent: quantization, entropy coding and JPEG."""

import torch

from advlatent.evalcli import dataset_for, resplit, trained_model
from advlatent.evalcli.experiments import MNIST_CNN, train_spec
from advlatent.splitnet import (
    accuracy,
    attach_codec,
    calibrate_codec,
    dequantize_latent,
    entropy_code_latent,
    entropy_decode_latent,
    jpeg_code_latent,
    jpeg_decode_latent,
    parse_codec,
    quantize_latent,
)

torch.set_num_threads(1)
base, _ = trained_model(train_spec(MNIST_CNN))
split = resplit(base, 2)
data = dataset_for("mnist", base.input_shape)
with torch.no_grad():
    z = split.forward_mobile(data.test_x[:8])
value_range = (float(z.min()), float(z.max()))
raw = z.numel() * 4
print(f"raw float32 latent: {raw} bytes")

for bits in (8, 4):
    codes = quantize_latent(z, bits, value_range)
    err = (dequantize_latent(codes, bits, value_range) - z).abs().max()
    blob = entropy_code_latent(z, bits, value_range)
    same = torch.equal(entropy_decode_latent(blob), dequantize_latent(codes, bits, value_range))
    print(f"{bits}-bit: max error {float(err):.4f}, entropy coded {len(blob)} bytes, lossless w.r.t. quantization: {same}")

for quality in (90, 50, 10):
    blob = jpeg_code_latent(z, quality)
    err = (jpeg_decode_latent(blob) - z).abs().mean()
    print(f"JPEG q{quality}: {len(blob)} bytes, mean error {float(err):.4f}")

# Codecs plug into the split; accuracy barely moves at 8 bits.
calib = data.test_x[1000:1512]
for spec in ("qt:8", "qt:2", "jc:50"):
    codec = calibrate_codec(split, parse_codec(spec), calib)
    acc = accuracy(attach_codec(resplit(base, 2), codec), data.test_x[:2000], data.test_y[:2000])
    print(f"{spec}: accuracy {acc:.4f}")
