"""Print parameter and MAC counts for the builtin descriptors next to their reference figures."""

from structprune.accounting import count_params
from structprune.arch import load_builtin

REFERENCE = {  # name: (params, MACs or None)
    "resnet18": (11.6e6, 1.81e9),
    "resnet34": (21.8e6, 3.66e9),
    "resnet9": (5.4e6, 0.89e9),
    "wrn-40-2": (2.2e6, None),
    "densenet-bc-100-12": (0.8e6, None),
}


def main():
    print(f"{'network':<20}{'params':>12}{'ref':>8}{'diff':>8}{'MACs':>16}{'ref':>8}{'diff':>8}")
    for name, (ref_p, ref_m) in REFERENCE.items():
        r = count_params(load_builtin(name))
        mac_cols = f"{'':>8}{'':>8}" if ref_m is None else f"{ref_m / 1e9:>7.2f}G{100 * (r.macs / ref_m - 1):>+7.1f}%"
        print(f"{name:<20}{r.params:>12,}{ref_p / 1e6:>7.1f}M{100 * (r.params / ref_p - 1):>+7.1f}%"
              f"{r.macs:>16,}{mac_cols}")


if __name__ == "__main__":
    main()
