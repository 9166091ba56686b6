"""Convert torchvision's ImageNet DenseNet-121 backbone to an .npz archive.

Usage: python tools/export_densenet121.py densenet121.npz

Arrays keep torchvision's state_dict names (features.*) and are stored as
float64. Requires torch and torchvision; the weights are downloaded on first use.
"""

import argparse

import numpy as np
import torchvision


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="output .npz path")
    args = parser.parse_args()

    weights = torchvision.models.DenseNet121_Weights.IMAGENET1K_V1
    model = torchvision.models.densenet121(weights=weights)
    arrays = {
        name: tensor.detach().cpu().numpy().astype(np.float64)
        for name, tensor in model.state_dict().items()
        if name.startswith("features.") and not name.endswith("num_batches_tracked")
    }
    np.savez(args.out, **arrays)
    print(f"wrote {len(arrays)} arrays to {args.out}")


if __name__ == "__main__":
    main()
