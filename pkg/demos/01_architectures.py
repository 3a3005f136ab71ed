"""Architecture strings: parsing, shape inference and parameter counts.

Every model in the library is described by a short string such as
``C(96,7,3)-ReLU-P(2,2)``. This script parses the nine reference
configurations, prints the feature-map sizes each layer produces on a
64x64 patch and counts the trainable parameters.
"""
import numpy as np

from patchcompare.arch import ArchSpec, expand_stacks, infer_shapes, parse_arch, render_arch
from patchcompare.models import CONFIGURATIONS, build_model, configuration_strings


def main():
    for name, text in configuration_strings().items():
        spec = expand_stacks(parse_arch(text))
        assert render_arch(parse_arch(text)) == text
        print(f"{name:16s} {len(spec):2d} layers  {text}")

    print("\nsiamese branch on a 64x64 patch:")
    branch = parse_arch(build_model("siam").archs["branch"])
    for desc, shape in zip(branch.layers, infer_shapes(branch, (1, 64, 64))):
        print(f"  {render_arch(ArchSpec((desc,))):12s} -> {shape}")

    print("\nparameters and descriptor lengths:")
    for name in sorted(CONFIGURATIONS):
        kind, mode = CONFIGURATIONS[name]
        m = build_model(kind, mode=mode, dtype=np.float32)
        length = "-" if m.kind.is_two_channel else m.descriptor_length()
        print(f"  {name:16s} {m.num_parameters():>9,d} parameters, descriptor {length}")


if __name__ == "__main__":
    main()
