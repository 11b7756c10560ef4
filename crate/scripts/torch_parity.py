"""Writes randomly initialized torchvision backbones plus reference
features, for checking the Rust backbones against PyTorch numerically.

    python scripts/torch_parity.py OUT_DIR [ARCH ...]

For each arch this writes `<arch>.safetensors` (same layout as the weight
export) and `<arch>.parity.safetensors` holding `input` [2, 3, 96, 96] and
`features` [2, F] from the eval-mode network with its head removed.
Batch-norm running statistics are randomized so inference-mode
normalization is exercised.
"""

import sys
from pathlib import Path

import torch
import torchvision
from safetensors.torch import save_file

SIZE = 96


def build(arch):
    if arch == "inception_v3":
        m = torchvision.models.inception_v3(weights=None, aux_logits=False, transform_input=False, init_weights=True)
        m.fc = torch.nn.Identity()
        return m, ("fc.", "AuxLogits.")
    m = getattr(torchvision.models, arch)(weights=None)
    if arch == "resnet18":
        m.fc = torch.nn.Identity()
        return m, ("fc.",)
    if arch == "vgg11_bn":
        m.classifier[6] = torch.nn.Identity()
        return m, ("classifier.6.",)
    m.classifier = torch.nn.Identity()
    return m, ("classifier.",)


def main(argv):
    if not argv:
        sys.exit(__doc__)
    out = Path(argv[0])
    out.mkdir(parents=True, exist_ok=True)
    for arch in argv[1:] or ["resnet18", "vgg11_bn", "densenet121", "inception_v3"]:
        torch.manual_seed(0)
        model, dropped = build(arch)
        for mod in model.modules():
            if isinstance(mod, torch.nn.BatchNorm2d):
                mod.running_mean.uniform_(-0.2, 0.2)
                mod.running_var.uniform_(0.5, 1.5)
                mod.weight.data.uniform_(0.5, 1.5)
                mod.bias.data.uniform_(-0.2, 0.2)
        model.eval()
        state = {
            k: v.detach().float().contiguous()
            for k, v in model.state_dict().items()
            if not k.startswith(dropped) and not k.endswith("num_batches_tracked")
        }
        save_file(state, str(out / f"{arch}.safetensors"))
        x = torch.randn(2, 3, SIZE, SIZE)
        with torch.no_grad():
            feats = model(x)
        save_file({"input": x.contiguous(), "features": feats.float().contiguous()}, str(out / f"{arch}.parity.safetensors"))
        print(arch, tuple(feats.shape))


if __name__ == "__main__":
    main(sys.argv[1:])
