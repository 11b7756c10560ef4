"""Exports ImageNet torchvision backbones as `<arch>.safetensors`.

Tensor names are the torchvision state-dict names; classification heads
(and the Inception auxiliary branch) are dropped. Point SOLIS_CACHE at the
output directory to enable `pretrained: true`.

    python scripts/export_torchvision_weights.py OUT_DIR [ARCH ...]
"""

import sys
from pathlib import Path

import torchvision
from safetensors.torch import save_file

ARCHS = {
    "resnet18": ("ResNet18_Weights", ("fc.",)),
    "vgg11_bn": ("VGG11_BN_Weights", ("classifier.6.",)),
    "densenet121": ("DenseNet121_Weights", ("classifier.",)),
    "inception_v3": ("Inception_V3_Weights", ("fc.", "AuxLogits.")),
}


def export(arch, out_dir):
    weights_name, dropped = ARCHS[arch]
    weights = getattr(torchvision.models, weights_name).IMAGENET1K_V1
    model = getattr(torchvision.models, arch)(weights=weights)
    state = {
        name: t.detach().float().contiguous()
        for name, t in model.state_dict().items()
        if not name.startswith(dropped) and not name.endswith("num_batches_tracked")
    }
    path = out_dir / f"{arch}.safetensors"
    save_file(state, str(path))
    print(f"{path}: {len(state)} tensors, {sum(t.numel() for t in state.values()):,} values")


def main(argv):
    if not argv:
        sys.exit(__doc__)
    out_dir = Path(argv[0])
    out_dir.mkdir(parents=True, exist_ok=True)
    for arch in argv[1:] or ARCHS:
        export(arch, out_dir)


if __name__ == "__main__":
    main(sys.argv[1:])
